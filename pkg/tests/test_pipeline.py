"""Staged-sampling pipeline: projection, resampling target, grid
cross-check, artifacts, determinism."""

import json
import os

import numpy as np
import pytest
from scipy import stats

from mssample.core import ConstraintMap, check_gradient
from mssample.density import TrainConfig, load_flow, train_flow
from mssample.errors import ConvergenceGateFailed, DimensionMismatch
from mssample.funnels import (funnel_constraint, funnel_hyper_prior,
                              generalized_funnel_model)
from mssample.hmc import HMCConfig, load_chain, sample
from mssample.pipeline import (MSSRun, build_stage2_target, grid_density,
                               run_mss, save_matrix_csv,
                               stage1_marginal_samples, support_warnings)
from mssample.ptamodel import pta_constraint, pta_hyper_prior


def _funnel_run(n_local, seed, out_dir=None, **overrides):
    kw = dict(
        generalized_model=generalized_funnel_model(n_local),
        constraint=funnel_constraint(n_local),
        hyper_prior=funnel_hyper_prior(),
        stage1_cfg=HMCConfig(n_warmup=500, n_samples=1500),
        stage2_cfg=HMCConfig(n_warmup=300, n_samples=2000),
        flow_cfg=TrainConfig(n_layers=4, hidden_width=32, max_epochs=60),
        n_chains=4,
        seed=seed,
        out_dir=out_dir,
    )
    kw.update(overrides)
    return MSSRun(**kw)


class _FlatDensity:
    """Constant log density, standing in for a flow fitted to a flat
    marginal."""

    def __init__(self, dim):
        self.dim = dim

    def log_density_and_grad(self, x):
        return 0.0, np.zeros(self.dim)


@pytest.fixture(scope="module")
def widened_marginal():
    return stage1_marginal_samples(_funnel_run(9, seed=303))


@pytest.fixture(scope="module")
def box_flow():
    rng = np.random.default_rng(21)
    samples = rng.uniform(-4.0, 4.0, size=(1500, 9))
    cfg = TrainConfig(n_layers=4, hidden_width=32, max_epochs=30, seed=5)
    return train_flow(samples, cfg)


@pytest.fixture(scope="module")
def funnel_pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("mssrun")
    run = _funnel_run(4, seed=11, out_dir=str(out), n_chains=3)
    chain, artifacts = run_mss(run)
    return run, chain, artifacts


class TestRunValidation:
    def test_constraint_width_must_match_hyper_block(self):
        with pytest.raises(DimensionMismatch):
            _funnel_run(4, seed=0, constraint=funnel_constraint(5))

    def test_constraint_input_must_match_prior(self):
        with pytest.raises(DimensionMismatch):
            _funnel_run(4, seed=0, hyper_prior=pta_hyper_prior())

    def test_chain_counts(self):
        with pytest.raises(ValueError):
            _funnel_run(4, seed=0, n_chains=1)
        with pytest.raises(ValueError):
            _funnel_run(4, seed=0, stage2_chains=0)


class TestStageOne:
    def test_projected_marginals_are_uniform(self, widened_marginal):
        # the widened funnel's hyper coordinates have a flat prior and
        # no data term, so each projected marginal must come back flat
        cdf = stats.uniform(loc=-4.0, scale=8.0).cdf
        for j in range(widened_marginal.shape[1]):
            ks = stats.kstest(widened_marginal[:, j], cdf).statistic
            assert ks < 0.03

    def test_projection_keeps_only_hyper_block(self, widened_marginal):
        model = generalized_funnel_model(9)
        assert model.space.dim == 18
        assert widened_marginal.shape == (6000, 9)
        assert np.all(widened_marginal >= -4.0)
        assert np.all(widened_marginal <= 4.0)

    def test_two_seeds_agree(self, widened_marginal):
        other = stage1_marginal_samples(_funnel_run(9, seed=904))
        for j in range(9):
            ks = stats.ks_2samp(widened_marginal[:, j], other[:, j])
            assert ks.statistic < 0.05

    def test_gate_failure_carries_diagnostics(self):
        run = _funnel_run(
            2, seed=7, n_chains=2,
            stage1_cfg=HMCConfig(n_warmup=100, n_samples=150),
            ess_min=1e9)
        with pytest.raises(ConvergenceGateFailed, match="ess") as err:
            stage1_marginal_samples(run)
        assert str(err.value).startswith("sample:")
        report = err.value.report
        assert set(report.ess) == {"log10_z1", "log10_z2"}
        assert not report.gates_passed


class TestStage2Target:
    def test_flat_density_reduces_to_prior(self):
        prior = funnel_hyper_prior()
        target = build_stage2_target(_FlatDensity(9), funnel_constraint(9),
                                     prior)
        for y in (-4.0, 0.0, 2.5):
            point = np.array([y])
            assert target.log_density(point) == \
                pytest.approx(prior.log_density(point), rel=1e-12)
            np.testing.assert_allclose(target.grad_log_density(point),
                                       prior.grad_log_density(point))

    def test_flat_density_draws_match_prior(self):
        target = build_stage2_target(_FlatDensity(9), funnel_constraint(9),
                                     funnel_hyper_prior())
        chain = sample(target, HMCConfig(n_warmup=300, n_samples=4000,
                                         seed=15))
        ks = stats.kstest(chain.draws[:, 0],
                          lambda v: stats.norm.cdf(v, 0.0, 3.0)).statistic
        assert ks < 0.03

    def test_gradient_matches_finite_differences(self, box_flow):
        target = build_stage2_target(box_flow, funnel_constraint(9),
                                     funnel_hyper_prior())
        for y in (-2.0, 0.5, 3.0):
            assert check_gradient(target, np.array([y])) < 1e-4

    def test_gradient_through_affine_image(self, small_dataset):
        rng = np.random.default_rng(3)
        flow = train_flow(rng.normal(size=(400, 4)),
                          TrainConfig(n_layers=2, hidden_width=16,
                                      max_epochs=3, seed=1))
        target = build_stage2_target(flow, pta_constraint(small_dataset),
                                     pta_hyper_prior())
        for point in ([0.3, 3.0], [-0.5, 1.2], [1.0, 5.5]):
            assert check_gradient(target, np.array(point)) < 1e-4

    def test_dimension_validation(self, small_dataset):
        with pytest.raises(DimensionMismatch):
            build_stage2_target(_FlatDensity(5), funnel_constraint(9),
                                funnel_hyper_prior())
        with pytest.raises(DimensionMismatch):
            build_stage2_target(_FlatDensity(4),
                                pta_constraint(small_dataset),
                                funnel_hyper_prior())

    def test_outside_training_box_stays_finite(self, box_flow):
        # constraint image of y=40 sits far outside the (-4, 4) box
        # the flow was fitted on; the tails must decay, not blow up
        target = build_stage2_target(box_flow, funnel_constraint(9),
                                     funnel_hyper_prior())
        inside = target.log_density(np.array([1.0]))
        for y in (40.0, 200.0):
            logp, grad = target.logp_and_grad(np.array([y]))
            assert np.isfinite(logp)
            assert np.all(np.isfinite(grad))
            assert logp < inside - 50.0


class TestGridDensity:
    def test_matches_exact_cell_masses(self):
        grid = grid_density(
            lambda t: float(stats.norm.logpdf(t[0])),
            [(-8.0, 8.0)], n_cells=200)
        exact = np.diff(stats.norm.cdf(grid.edges[0]))
        exact /= exact.sum()
        assert 0.5 * np.abs(grid.pmf - exact).sum() < 1e-3

    def test_sampling_follows_the_table(self):
        grid = grid_density(
            lambda t: float(stats.norm.logpdf(t[0])),
            [(-8.0, 8.0)], n_cells=200)
        draws = grid.sample(20000, seed=4)
        assert draws.shape == (20000, 1)
        assert stats.kstest(draws[:, 0], stats.norm.cdf).statistic < 0.02

    def test_marginal_of_product_grid(self):
        def logp(t):
            return float(stats.norm.logpdf(t[0])
                         + stats.norm.logpdf(t[1], loc=1.0, scale=2.0))

        grid2 = grid_density(logp, [(-6.0, 6.0), (-7.0, 9.0)], n_cells=80)
        grid1 = grid_density(lambda t: float(stats.norm.logpdf(t[0])),
                             [(-6.0, 6.0)], n_cells=80)
        centers, pmf = grid2.marginal(0)
        np.testing.assert_allclose(centers, grid1.centers[0])
        np.testing.assert_allclose(pmf, grid1.pmf, atol=1e-12)
        assert grid2.pmf.sum() == pytest.approx(1.0)

    def test_validation(self):
        flat = lambda t: 0.0  # noqa: E731
        with pytest.raises(DimensionMismatch):
            grid_density(flat, [(-1, 1)] * 3)
        with pytest.raises(ValueError):
            grid_density(flat, [(-1, 1)], n_cells=1)
        with pytest.raises(ValueError):
            grid_density(flat, [(2, -2)])
        with pytest.raises(ValueError):
            grid_density(lambda t: -np.inf, [(-1, 1)])
        grid = grid_density(flat, [(-1, 1)], n_cells=4)
        with pytest.raises(DimensionMismatch):
            grid.marginal(1)
        with pytest.raises(ValueError):
            grid.sample(0, seed=1)


class TestSupportWarnings:
    def test_bounded_corners_flagged(self):
        # the widened per-bin bounds do not contain the image of the
        # steep-spectrum corner, so the corner probe must fire
        lfr = np.array([0.0, 0.5, 1.0])
        jac = np.column_stack([np.ones(3), -lfr])
        cmap = ConstraintMap(
            name="affine", in_dim=2, out_dim=3,
            func=lambda y: y[0] - y[1] * lfr,
            jacobian=lambda y: jac)
        prior = pta_hyper_prior()
        tight = support_warnings(cmap, prior,
                                 np.full(3, -8.0), np.full(3, 4.0))
        assert tight and "corner" in tight[0]
        wide = support_warnings(cmap, prior,
                                np.full(3, -10.0), np.full(3, 6.0))
        assert wide == []

    def test_unbounded_prior_probed_at_draws(self):
        cmap = funnel_constraint(9)
        prior = funnel_hyper_prior()
        wide = support_warnings(cmap, prior, np.full(9, -4.0),
                                np.full(9, 4.0))
        assert wide == []
        tight = support_warnings(cmap, prior, np.full(9, -0.2),
                                 np.full(9, 0.2))
        assert tight and "prior draw" in tight[0]


class TestRunMss:
    def test_end_to_end_funnel_marginal(self, funnel_pipeline):
        _, chain, _ = funnel_pipeline
        assert chain.names == ["y"]
        ks = stats.kstest(chain.draws[:, 0],
                          lambda v: stats.norm.cdf(v, 0.0, 3.0)).statistic
        assert ks < 0.05

    def test_artifact_layout(self, funnel_pipeline):
        run, _, artifacts = funnel_pipeline
        paths = artifacts["paths"]
        for key in ("config", "report", "marginal", "flow", "stage2"):
            assert key in paths
        assert len(paths["stage1"]) == run.n_chains
        for entry in paths.values():
            for p in (entry if isinstance(entry, list) else [entry]):
                assert os.path.exists(p)

    def test_report_contents(self, funnel_pipeline):
        _, _, artifacts = funnel_pipeline
        report = json.loads(open(artifacts["paths"]["report"]).read())
        assert report["status"] == "ok"
        assert report["stage1"]["gates_passed"]
        assert "y" in report["stage2"]["rhat"]
        assert report["comparisons"]["grid_tv"] < 0.1
        assert report["config"]["model_kind"] == "generalized_funnel"
        assert "generated_at" in report

    def test_marginal_csv_round_trip(self, funnel_pipeline):
        _, _, artifacts = funnel_pipeline
        path = artifacts["paths"]["marginal"]
        header = open(path).readline().strip().split(",")
        assert header == [f"log10_z{i}" for i in range(1, 5)]
        body = np.loadtxt(path, delimiter=",", skiprows=1)
        np.testing.assert_array_equal(body, artifacts["marginal"])

    def test_stage1_chains_reload(self, funnel_pipeline):
        run, _, artifacts = funnel_pipeline
        chain = load_chain(artifacts["paths"]["stage1"][0])
        assert chain.names == run.generalized_model.space.names
        np.testing.assert_array_equal(
            chain.draws, artifacts["stage1_chains"][0].draws)

    def test_stage2_chain_reloads(self, funnel_pipeline):
        _, chain, artifacts = funnel_pipeline
        loaded = load_chain(artifacts["paths"]["stage2"])
        np.testing.assert_array_equal(loaded.draws, chain.draws)
        np.testing.assert_array_equal(loaded.logp, chain.logp)

    def test_flow_file_reloads(self, funnel_pipeline):
        _, _, artifacts = funnel_pipeline
        flow = load_flow(artifacts["paths"]["flow"])
        for row in artifacts["marginal"][:3]:
            assert flow.log_density(row) == \
                pytest.approx(artifacts["flow"].log_density(row), rel=1e-12)

    def test_native_logp_recorded(self, funnel_pipeline):
        # the stage-1 CSVs carry the widened model's own log density,
        # not the reparameterised inner one
        run, _, artifacts = funnel_pipeline
        chain = artifacts["stage1_chains"][0]
        model = run.generalized_model
        for k in (0, 17, 311):
            assert chain.logp[k] == \
                pytest.approx(model.log_density(chain.draws[k]), rel=1e-10)

    def test_determinism(self, tmp_path):
        def one(out):
            run = _funnel_run(
                3, seed=5, out_dir=str(out), n_chains=2,
                stage1_cfg=HMCConfig(n_warmup=400, n_samples=800),
                stage2_cfg=HMCConfig(n_warmup=200, n_samples=800),
                flow_cfg=TrainConfig(n_layers=2, hidden_width=16,
                                     max_epochs=15))
            run_mss(run)
            return out

        a = one(tmp_path / "a")
        b = one(tmp_path / "b")
        for rel in ("config.json", "marginal.csv", "flow.json",
                    "stage2.csv", "stage2.csv.json", "stage1/chain0.csv",
                    "stage1/chain1.csv"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()
        ra = json.loads((a / "report.json").read_text())
        rb = json.loads((b / "report.json").read_text())
        ra.pop("generated_at")
        rb.pop("generated_at")
        assert ra == rb

    def test_gate_failure_still_writes_report(self, tmp_path):
        run = _funnel_run(
            2, seed=7, n_chains=2, out_dir=str(tmp_path),
            stage1_cfg=HMCConfig(n_warmup=100, n_samples=150),
            ess_min=1e9)
        with pytest.raises(ConvergenceGateFailed):
            run_mss(run)
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["status"] == "gate_failure"
        assert not report["stage1"]["gates_passed"]
        assert (tmp_path / "config.json").exists()
        assert (tmp_path / "stage1" / "chain0.csv").exists()


def test_save_matrix_requires_matching_names(tmp_path):
    with pytest.raises(DimensionMismatch):
        save_matrix_csv(tmp_path / "m.csv", ["a"], np.zeros((3, 2)))
