"""Multi-stage sampling orchestrator.

The method runs in three steps: sample a widened hierarchical model
(through one of the reparameterisations in :mod:`mssample.reparam`),
train a normalizing flow on the hyper block of those draws, then
resample the flow restricted to the constraint surface, reweighted by
the original hyper prior.  :func:`run_mss` wires the steps together and
persists every intermediate artifact so a run can be audited or
replayed piecewise.
"""

import dataclasses
import itertools
import json
import time
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .core import ConstraintMap, TargetModel
from .density import TrainConfig, train_flow, save_flow
from .diagnostics import (evaluate_gates, grid_tv_distance, histogram_pmf,
                          pmf_from_log_density)
from .errors import ConvergenceGateFailed, DimensionMismatch, MssError
from .hmc import Chain, HMCConfig, sample_chains, save_chain
from .reparam import reparameterize
from .seeding import substream_seed

REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# run description


@dataclasses.dataclass
class MSSRun:
    """Everything needed to execute one multi-stage run.

    The widened model carries both blocks; the constraint maps the
    original hyper space into the widened hyper block, and hyper_prior
    is the log density the final draws are reweighted by.  One master
    seed fans out into per-step substreams, so runs are reproducible
    end to end from this object alone.
    """

    generalized_model: TargetModel
    constraint: ConstraintMap
    hyper_prior: TargetModel
    stage1_cfg: HMCConfig
    stage2_cfg: HMCConfig
    flow_cfg: TrainConfig = None
    stage1_scheme: str = "prs"
    n_chains: int = 4
    stage2_chains: int = 2
    rhat_max: float = 1.01
    ess_min: float = 400.0
    grid_cells: int = 60
    seed: int = 0
    out_dir: str = None
    config_echo: dict = None

    def __post_init__(self):
        hyper_idx = self.generalized_model.space.block_indices("hyper")
        if self.constraint.out_dim != hyper_idx.size:
            raise DimensionMismatch(
                f"constraint maps into {self.constraint.out_dim} "
                f"coordinates but the widened model has "
                f"{hyper_idx.size} hyper coordinates")
        if self.constraint.in_dim != self.hyper_prior.space.dim:
            raise DimensionMismatch(
                f"constraint input dimension {self.constraint.in_dim} "
                f"does not match the hyper prior "
                f"({self.hyper_prior.space.dim})")
        if self.n_chains < 2:
            raise ValueError("convergence gates need at least two chains")
        if self.stage2_chains < 1:
            raise ValueError("need at least one resampling chain")


@contextmanager
def _step_errors(tag):
    # re-raise with the failing step named, keeping type and attributes
    try:
        yield
    except MssError as exc:
        if str(exc).startswith(tag):
            raise
        wrapped = type(exc)(f"{tag}: {exc}")
        wrapped.__dict__.update(exc.__dict__)
        raise wrapped from exc


# ---------------------------------------------------------------------------
# step 1: sample the widened model, project the hyper block


def _native_chains(target, chains, names):
    """Map reparameterised chains back to native coordinates.

    The stored logp column becomes the native-model log density:
    inner logp minus the pushforward log Jacobian.
    """
    out = []
    for c in chains:
        draws = target.pushforward(c.draws)
        logp = c.logp - target.logdet_rule(c.draws)
        out.append(dataclasses.replace(c, draws=draws, logp=logp,
                                       names=list(names)))
    return out


def _sample_widened(run: MSSRun):
    model = run.generalized_model
    target = reparameterize(model, run.stage1_scheme)
    cfg = dataclasses.replace(run.stage1_cfg,
                              seed=substream_seed(run.seed, "stage1"))
    chains = sample_chains(target.inner, cfg, run.n_chains)
    native = _native_chains(target, chains, model.space.names)
    hyper_idx = model.space.block_indices("hyper")
    report = evaluate_gates(native, hyper_idx, model.space.names,
                            rhat_max=run.rhat_max, ess_min=run.ess_min)
    marginal = np.vstack([c.draws for c in native])[:, hyper_idx]
    if not report.gates_passed:
        exc = ConvergenceGateFailed(
            "widened-model chains failed convergence gates: "
            + "; ".join(report.gate_failures))
        exc.report = report
        exc.chains = native
        raise exc
    return marginal, native, report


def stage1_marginal_samples(run: MSSRun) -> np.ndarray:
    """Hyper-block draws of the widened model, local columns dropped.

    Chains must pass the convergence gates (split R-hat and combined
    ESS on every hyper coordinate); failure raises
    ConvergenceGateFailed carrying the per-coordinate report.
    """
    with _step_errors("sample"):
        marginal, _, _ = _sample_widened(run)
    return marginal


# ---------------------------------------------------------------------------
# step 3 target: estimated density on the constraint surface


def build_stage2_target(flow, constraint: ConstraintMap,
                        hyper_prior: TargetModel) -> TargetModel:
    """Resampling target over the original hyper space.

    logp(y) = flow(constraint(y)) + hyper_prior(y).  The gradient
    chains the constraint Jacobian into the flow gradient.  No volume
    factor enters: the estimated density is evaluated along the
    surface, not transformed onto it.  Points whose image leaves the
    trained region stay finite through the flow's Gaussian tails.

    flow is anything with a ``dim`` attribute and a
    ``log_density_and_grad(x) -> (logp, grad)`` method.
    """
    if flow.dim != constraint.out_dim:
        raise DimensionMismatch(
            f"flow dimension {flow.dim} != constraint image "
            f"dimension {constraint.out_dim}")
    if hyper_prior.space.dim != constraint.in_dim:
        raise DimensionMismatch(
            f"hyper prior dimension {hyper_prior.space.dim} != "
            f"constraint input dimension {constraint.in_dim}")
    space = hyper_prior.space

    def fused(theta):
        theta = space.validate(theta)
        flow_logp, flow_grad = flow.log_density_and_grad(constraint(theta))
        prior_logp, prior_grad = hyper_prior.value_and_grad(theta)
        grad = constraint.jacobian(theta).T @ flow_grad + prior_grad
        return float(flow_logp + prior_logp), grad

    return TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=hyper_prior.prior_sampler,
        kind="mss_stage2",
        meta={"constraint": constraint.name, "flow_dim": int(flow.dim)},
    )


# ---------------------------------------------------------------------------
# dense-grid evaluator (dims 1-2): independent cross-check and KDE path


@dataclasses.dataclass
class GridDensity:
    """Normalised cell masses of a log density on a regular box grid."""

    edges: list
    centers: list
    log_values: np.ndarray
    pmf: np.ndarray

    def sample(self, n, seed):
        """Draw cells by mass, jitter uniformly within each cell."""
        if n < 1:
            raise ValueError("n must be at least 1")
        rng = np.random.default_rng(seed)
        flat = self.pmf.ravel()
        idx = rng.choice(flat.size, size=n, p=flat)
        multi = np.unravel_index(idx, self.pmf.shape)
        cols = []
        for ax, ids in enumerate(multi):
            lo = self.edges[ax][ids]
            hi = self.edges[ax][ids + 1]
            cols.append(rng.uniform(lo, hi))
        return np.column_stack(cols)

    def marginal(self, axis):
        """(centers, pmf) of one axis with the other summed out."""
        if self.pmf.ndim == 1:
            if axis != 0:
                raise DimensionMismatch("1-D grid has only axis 0")
            return self.centers[0], self.pmf
        return self.centers[axis], self.pmf.sum(axis=1 - axis)


def grid_density(log_density, bounds, n_cells=128) -> GridDensity:
    """Tabulate a log density at the cell centers of a box grid.

    bounds is one (lo, hi) pair per dimension; dims 1 and 2 only.  The
    returned masses are normalised over the grid, so the box must
    cover essentially all of the density's mass for the table to mean
    anything.
    """
    bounds = [tuple(map(float, b)) for b in bounds]
    if not 1 <= len(bounds) <= 2:
        raise DimensionMismatch("grid evaluator covers dims 1 and 2 only")
    if n_cells < 2:
        raise ValueError("need at least two cells per axis")
    for lo, hi in bounds:
        if not lo < hi:
            raise ValueError(f"empty grid interval [{lo}, {hi}]")
    edges = [np.linspace(lo, hi, n_cells + 1) for lo, hi in bounds]
    centers = [0.5 * (e[:-1] + e[1:]) for e in edges]
    if len(bounds) == 1:
        logv = np.array([log_density(np.array([c])) for c in centers[0]])
    else:
        logv = np.empty((n_cells, n_cells))
        for i, a in enumerate(centers[0]):
            for j, b in enumerate(centers[1]):
                logv[i, j] = log_density(np.array([a, b]))
    if not np.all(np.isfinite(logv)):
        raise ValueError("log density not finite everywhere on the grid")
    return GridDensity(edges, centers, logv, pmf_from_log_density(logv))


def _hyper_grid_bounds(run: MSSRun, draws):
    """Grid box: the prior bounds where finite, else the draw range
    padded so every draw lands inside."""
    space = run.hyper_prior.space
    out = []
    for j in range(space.dim):
        if space.bounded[j]:
            out.append((space.lower[j], space.upper[j]))
        else:
            lo, hi = draws[:, j].min(), draws[:, j].max()
            pad = 0.05 * (hi - lo)
            out.append((lo - pad, hi + pad))
    return out


# ---------------------------------------------------------------------------
# flow-support check


def support_warnings(constraint: ConstraintMap, hyper_prior: TargetModel,
                     train_min, train_max):
    """Whether the constraint image of the hyper prior's box stays
    inside the flow's training range.

    Bounded priors are probed at the box corners; unbounded ones at a
    fixed panel of prior draws.  Returns human-readable messages, one
    per offending probe point (empty when all is well).
    """
    train_min = np.asarray(train_min, dtype=float)
    train_max = np.asarray(train_max, dtype=float)
    space = hyper_prior.space
    if np.all(space.bounded):
        probes = [np.array(c) for c in
                  itertools.product(*zip(space.lower, space.upper))]
        label = "corner"
    elif hyper_prior.prior_sampler is not None:
        rng = np.random.default_rng(0)
        probes = [hyper_prior.prior_sampler(rng) for _ in range(32)]
        label = "prior draw"
    else:
        return []
    out = []
    for point in probes:
        image = constraint(point)
        low = image < train_min
        high = image > train_max
        if np.any(low) or np.any(high):
            j = int(np.argmax(low | high))
            out.append(
                f"{label} {np.round(point, 4).tolist()} maps to "
                f"{image[j]:.3f} in coordinate {j}, outside the trained "
                f"range [{train_min[j]:.3f}, {train_max[j]:.3f}]")
    return out


# ---------------------------------------------------------------------------
# artifacts


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_matrix_csv(path, names, matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[1] != len(names):
        raise DimensionMismatch("one column name per matrix column")
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in matrix:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _config_payload(run: MSSRun):
    payload = {
        "model_kind": run.generalized_model.kind,
        "constraint": run.constraint.name,
        "hyper_prior_kind": run.hyper_prior.kind,
        "hyper_names": list(run.hyper_prior.space.names),
        "stage1_scheme": run.stage1_scheme,
        "n_chains": run.n_chains,
        "stage2_chains": run.stage2_chains,
        "rhat_max": run.rhat_max,
        "ess_min": run.ess_min,
        "grid_cells": run.grid_cells,
        "seed": run.seed,
        "stage1_cfg": dataclasses.asdict(run.stage1_cfg),
        "stage2_cfg": dataclasses.asdict(run.stage2_cfg),
        "flow_cfg": dataclasses.asdict(run.flow_cfg)
        if run.flow_cfg is not None else None,
    }
    if run.config_echo:
        payload["echo"] = run.config_echo
    return payload


def _merge_chains(chains, seed):
    """Concatenate same-target chains into one Chain record."""
    return Chain(
        draws=np.vstack([c.draws for c in chains]),
        logp=np.concatenate([c.logp for c in chains]),
        names=list(chains[0].names),
        accept_rate=float(np.mean([c.accept_rate for c in chains])),
        step_size=float(np.mean([c.step_size for c in chains])),
        mass_diag=np.mean([c.mass_diag for c in chains], axis=0),
        divergences=int(sum(c.divergences for c in chains)),
        warmup_divergences=int(sum(c.warmup_divergences for c in chains)),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# the full pipeline


def run_mss(run: MSSRun):
    """Execute sample -> fit -> resample and return
    (stage2_chain, artifacts).

    artifacts holds the in-memory products (marginal draws, flow,
    report dict) plus the paths written when run.out_dir is set.  The
    run directory always ends up with config.json and report.json,
    even when a step fails, so failures stay diagnosable.
    """
    out_dir = Path(run.out_dir) if run.out_dir is not None else None
    paths = {}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "stage1").mkdir(exist_ok=True)
        paths["config"] = str(out_dir / "config.json")
        _write_json(paths["config"], _config_payload(run))

    report = {
        "version": REPORT_VERSION,
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": _config_payload(run),
        "status": "running",
        "stage1": None,
        "stage2": None,
        "support_warnings": [],
        "comparisons": {},
    }

    def _flush_report():
        if out_dir is not None:
            paths["report"] = str(out_dir / "report.json")
            _write_json(paths["report"], report)

    hyper_names = [run.generalized_model.space.names[i]
                   for i in
                   run.generalized_model.space.block_indices("hyper")]

    try:
        with _step_errors("sample"):
            marginal, native, report1 = _sample_widened(run)
    except ConvergenceGateFailed as exc:
        report["status"] = "gate_failure"
        report["stage1"] = getattr(exc, "report").to_dict() \
            if hasattr(exc, "report") else None
        if out_dir is not None and hasattr(exc, "chains"):
            for k, chain in enumerate(exc.chains):
                save_chain(chain, out_dir / "stage1" / f"chain{k}.csv")
        _flush_report()
        raise
    except MssError as exc:
        report["status"] = f"error: {exc}"
        _flush_report()
        raise
    report["stage1"] = report1.to_dict()

    if out_dir is not None:
        for k, chain in enumerate(native):
            path = out_dir / "stage1" / f"chain{k}.csv"
            save_chain(chain, path)
            paths.setdefault("stage1", []).append(str(path))
        paths["marginal"] = str(out_dir / "marginal.csv")
        save_matrix_csv(paths["marginal"], hyper_names, marginal)

    try:
        with _step_errors("fit"):
            flow_cfg = run.flow_cfg if run.flow_cfg is not None \
                else TrainConfig()
            flow_cfg = dataclasses.replace(
                flow_cfg, seed=substream_seed(run.seed, "flow"))
            flow = train_flow(marginal, flow_cfg)
    except MssError as exc:
        report["status"] = f"error: {exc}"
        _flush_report()
        raise
    if out_dir is not None:
        paths["flow"] = str(out_dir / "flow.json")
        save_flow(flow, paths["flow"])

    msgs = support_warnings(run.constraint, run.hyper_prior,
                            marginal.min(axis=0), marginal.max(axis=0))
    report["support_warnings"] = msgs
    for msg in msgs:
        warnings.warn(f"constraint image leaves flow support: {msg}",
                      RuntimeWarning, stacklevel=2)

    try:
        with _step_errors("resample"):
            target = build_stage2_target(flow, run.constraint,
                                         run.hyper_prior)
            seed2 = substream_seed(run.seed, "stage2")
            cfg2 = dataclasses.replace(run.stage2_cfg, seed=seed2)
            chains2 = sample_chains(target, cfg2, run.stage2_chains)
            stage2 = _merge_chains(chains2, seed2)
    except MssError as exc:
        report["status"] = f"error: {exc}"
        _flush_report()
        raise

    names2 = run.hyper_prior.space.names
    if run.stage2_chains >= 2:
        report2 = evaluate_gates(chains2, range(len(names2)), names2,
                                 rhat_max=run.rhat_max,
                                 ess_min=run.ess_min)
        report["stage2"] = report2.to_dict()
    else:
        report["stage2"] = {"note": "single chain, gates not evaluated"}
    report["stage2_summary"] = {
        name: {"mean": float(stage2.draws[:, j].mean()),
               "std": float(stage2.draws[:, j].std())}
        for j, name in enumerate(names2)}

    # independent cross-check: dense grid of the same target
    if len(names2) <= 2:
        bounds = _hyper_grid_bounds(run, stage2.draws)
        grid = grid_density(target.log_density, bounds, run.grid_cells)
        sample_pmf = histogram_pmf(stage2.draws, grid.edges,
                                   max_outside=0.01)
        report["comparisons"]["grid_tv"] = grid_tv_distance(
            sample_pmf, grid.pmf)
        report["comparisons"]["grid_bounds"] = [list(b) for b in bounds]

    report["status"] = "ok"
    if out_dir is not None:
        paths["stage2"] = str(out_dir / "stage2.csv")
        save_chain(stage2, paths["stage2"])
    _flush_report()

    artifacts = {
        "marginal": marginal,
        "flow": flow,
        "stage1_chains": native,
        "stage2_chains": chains2,
        "report": report,
        "paths": paths,
    }
    return stage2, artifacts
