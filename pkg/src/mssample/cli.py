"""Command-line surface.

Subcommands: simulate (synthetic dataset), sample (one model under a
reparameterisation scheme), mss (the full three-step pipeline),
flow-train (density fit on a sample CSV), diagnose (convergence report
for stored chains), compare (sample-vs-oracle overlay tables).  Every
command reads one JSON config, derives all randomness from one master
seed, writes a machine-readable report.json into --out, and exits 0 on
success, 2 on a convergence-gate failure, 1 on any other error.
"""

import dataclasses
import glob
import json
import time
from pathlib import Path

import click
import numpy as np
from scipy import stats

from . import funnels, ptamodel, ptasim
from .density import TrainConfig, save_flow, train_flow
from .diagnostics import (evaluate_gates, grid_tv_distance, histogram_pmf,
                          ks_statistic)
from .errors import AllDivergent, ConvergenceGateFailed, MssError
from .hmc import HMCConfig, load_chain, sample_chains, save_chain
from .pipeline import (MSSRun, _jsonable, _native_chains, _write_json,
                       grid_density, run_mss)
from .reparam import reparameterize
from .seeding import substream_seed

SCHEMES = ("ns", "prs", "cprs")


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"cannot read config {path}: {exc}")
    if not isinstance(doc, dict):
        raise click.ClickException("config must be a JSON object")
    return doc


def _resolve_seed(config, seed):
    return int(config.get("seed", 0)) if seed is None else int(seed)


def _hmc_cfg(doc):
    doc = dict(doc or {})
    doc.pop("seed", None)  # substreams of the master seed decide this
    try:
        return HMCConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"bad HMC settings: {exc}")


def _train_cfg(doc):
    doc = dict(doc or {})
    doc.pop("seed", None)
    try:
        return TrainConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"bad flow settings: {exc}")


def _dataset_for(config, seed):
    try:
        sim = ptasim.sim_config_from_dict(config.get("dataset", {}))
    except (MssError, TypeError) as exc:
        raise click.ClickException(f"bad dataset settings: {exc}")
    return ptasim.simulate_dataset(sim, substream_seed(seed, "dataset"))


def _build_native_model(config, seed):
    """The model named by the config, plus its dataset when it has
    one."""
    name = config.get("model")
    args = dict(config.get("model_args", {}))
    try:
        if name == "classic_funnel":
            args.pop("like_mu", None)
            args.pop("like_sigma", None)
            return funnels.classic_funnel_model(**args), None
        if name == "likelihood_funnel":
            return funnels.likelihood_funnel_model(**args), None
        if name == "generalized_funnel":
            return funnels.generalized_funnel_model(**args), None
        if name == "pta_powerlaw":
            dataset = _dataset_for(config, seed)
            return ptamodel.pta_powerlaw_model(dataset, **args), dataset
        if name == "pta_freespectral":
            dataset = _dataset_for(config, seed)
            return ptamodel.pta_freespectral_model(dataset, **args), dataset
    except TypeError as exc:
        raise click.ClickException(f"bad model_args: {exc}")
    raise click.ClickException(f"unknown model {name!r}")


def _build_mss_run(config, seed, out_dir):
    """Assemble the widened model, constraint and hyper prior for the
    experiment the config names."""
    name = config.get("model")
    args = dict(config.get("model_args", {}))
    doc = dict(config.get("mss", {}))
    dataset = None
    if name in ("classic_funnel", "likelihood_funnel"):
        n_local = int(args.get("n_local", 9))
        half_width = float(args.get("half_width", 4.0))
        likelihood = None
        if name == "likelihood_funnel":
            likelihood = (float(args.get("like_mu", 2.0)),
                          float(args.get("like_sigma", 5.0)))
        generalized = funnels.generalized_funnel_model(
            n_local, half_width, likelihood=likelihood)
        constraint = funnels.funnel_constraint(n_local, half_width)
        prior = funnels.funnel_hyper_prior(
            float(args.get("hyper_sigma", 3.0)))
        default_scheme = "prs"
    elif name in ("pta_powerlaw", "pta_freespectral"):
        dataset = _dataset_for(config, seed)
        generalized = ptamodel.pta_freespectral_model(
            dataset, rho_bounds=args.get("rho_bounds", ptamodel.RHO_BOUNDS))
        constraint = ptamodel.pta_constraint(dataset,
                                             f_ref=args.get("f_ref"))
        prior = ptamodel.pta_hyper_prior(
            amp_bounds=args.get("amp_bounds", ptamodel.AMP_BOUNDS),
            gamma_bounds=args.get("gamma_bounds", ptamodel.GAMMA_BOUNDS))
        default_scheme = "cprs"
    else:
        raise click.ClickException(f"unknown model {name!r}")
    run = MSSRun(
        generalized_model=generalized,
        constraint=constraint,
        hyper_prior=prior,
        stage1_cfg=_hmc_cfg(doc.get("stage1")),
        stage2_cfg=_hmc_cfg(doc.get("stage2")),
        flow_cfg=_train_cfg(doc.get("flow")),
        stage1_scheme=doc.get("stage1_scheme", default_scheme),
        n_chains=int(doc.get("n_chains", 4)),
        stage2_chains=int(doc.get("stage2_chains", 2)),
        rhat_max=float(doc.get("rhat_max", 1.01)),
        ess_min=float(doc.get("ess_min", 400.0)),
        grid_cells=int(doc.get("grid_cells", 60)),
        seed=seed,
        out_dir=out_dir,
        config_echo=config,
    )
    return run, dataset


def _report_path(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / "report.json"


def _emit_report(out_dir, payload):
    payload = dict(payload)
    payload.setdefault("version", 1)
    payload.setdefault("generated_at",
                       time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    _write_json(_report_path(out_dir), payload)


def _common(f):
    f = click.option("--out", "out_dir", required=True,
                     type=click.Path(file_okay=False),
                     help="run directory (created if missing)")(f)
    f = click.option("--seed", type=int, default=None,
                     help="master seed; falls back to the config")(f)
    f = click.option("--config", "config_path", required=True,
                     type=click.Path(exists=True, dir_okay=False),
                     help="JSON run configuration")(f)
    return f


@click.group()
def cli():
    """Multi-stage sampler for funnel-shaped hierarchical models."""


# ---------------------------------------------------------------------------
# simulate


@cli.command()
@_common
@click.pass_context
def simulate(ctx, config_path, seed, out_dir):
    """Draw the synthetic dataset the config describes."""
    config = _load_config(config_path)
    seed = _resolve_seed(config, seed)
    try:
        dataset = _dataset_for(config, seed)
    except MssError as exc:
        _emit_report(out_dir, {"status": f"error: {exc}"})
        click.echo(f"error: {exc}", err=True)
        ctx.exit(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ptasim.save_dataset(dataset, out / "dataset.json")
    ptasim.export_csv(dataset, out / "dataset.csv")
    _emit_report(out_dir, {
        "status": "ok",
        "config": config,
        "n_samples": int(dataset.times.size),
        "n_freq": int(dataset.n_freq),
        "sigma": float(dataset.sigma),
        "truth": dataset.truth,
        "files": ["dataset.json", "dataset.csv"],
    })
    click.echo(f"dataset with {dataset.times.size} samples written to "
               f"{out / 'dataset.json'}")
    ctx.exit(0)


# ---------------------------------------------------------------------------
# sample


@cli.command()
@click.option("--scheme", type=click.Choice(SCHEMES), default=None,
              help="reparameterisation scheme; overrides the config")
@_common
@click.pass_context
def sample(ctx, scheme, config_path, seed, out_dir):
    """Sample one model under ns, prs or cprs."""
    config = _load_config(config_path)
    seed = _resolve_seed(config, seed)
    doc = dict(config.get("sample", {}))
    scheme = scheme or doc.get("scheme", "ns")
    if scheme not in SCHEMES:
        raise click.ClickException(f"unknown scheme {scheme!r}")
    model, _ = _build_native_model(config, seed)
    try:
        target = reparameterize(model, scheme)
    except MssError as exc:
        _emit_report(out_dir, {"status": f"error: {exc}"})
        click.echo(f"error: {exc}", err=True)
        ctx.exit(1)
    cfg = dataclasses.replace(_hmc_cfg(doc.get("hmc")),
                              seed=substream_seed(seed, "baseline"))
    n_chains = int(doc.get("n_chains", 4))
    report = {"status": "running", "scheme": scheme,
              "model": model.kind, "config": config}
    try:
        chains = sample_chains(target.inner, cfg, n_chains)
    except AllDivergent as exc:
        report["status"] = f"all_divergent: {exc}"
        _emit_report(out_dir, report)
        click.echo(f"gate failure: {exc}", err=True)
        ctx.exit(2)
    except MssError as exc:
        report["status"] = f"error: {exc}"
        _emit_report(out_dir, report)
        click.echo(f"error: {exc}", err=True)
        ctx.exit(1)
    native = _native_chains(target, chains, model.space.names)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, chain in enumerate(native):
        save_chain(chain, out / f"chain{k}.csv")
    gate_idx = model.space.block_indices("hyper") \
        if doc.get("gate_block", "all") == "hyper" \
        else np.arange(model.space.dim)
    gates = evaluate_gates(native, gate_idx, model.space.names,
                           rhat_max=float(doc.get("rhat_max", 1.01)),
                           ess_min=float(doc.get("ess_min", 400.0)))
    max_div = int(doc.get("max_divergences", 0))
    total_div = sum(c.divergences for c in native)
    if total_div > max_div:
        gates.gate_failures.append(
            f"divergences = {total_div} > {max_div}")
        gates.gates_passed = False
    report["status"] = "ok" if gates.gates_passed else "gate_failure"
    report["gates"] = gates.to_dict()
    report["files"] = [f"chain{k}.csv" for k in range(n_chains)]
    _emit_report(out_dir, report)
    if not gates.gates_passed:
        click.echo("gate failure: " + "; ".join(gates.gate_failures),
                   err=True)
        ctx.exit(2)
    click.echo(f"{n_chains} chains of {cfg.n_samples} draws written to "
               f"{out}")
    ctx.exit(0)


# ---------------------------------------------------------------------------
# mss


@cli.command()
@_common
@click.pass_context
def mss(ctx, config_path, seed, out_dir):
    """Run the full pipeline: sample, fit, resample."""
    config = _load_config(config_path)
    seed = _resolve_seed(config, seed)
    run, _ = _build_mss_run(config, seed, out_dir)
    t0 = time.time()
    try:
        chain, artifacts = run_mss(run)
    except (ConvergenceGateFailed, AllDivergent) as exc:
        click.echo(f"gate failure: {exc}", err=True)
        ctx.exit(2)
    except MssError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(1)
    report = artifacts["report"]
    stage2_ok = report["stage2"].get("gates_passed", True)
    click.echo(f"pipeline finished in {time.time() - t0:.1f} s; "
               f"{chain.draws.shape[0]} final draws; report at "
               f"{artifacts['paths']['report']}")
    if not stage2_ok:
        click.echo("gate failure: "
                   + "; ".join(report["stage2"]["gate_failures"]), err=True)
        ctx.exit(2)
    ctx.exit(0)


# ---------------------------------------------------------------------------
# flow-train


@cli.command("flow-train")
@_common
@click.pass_context
def flow_train(ctx, config_path, seed, out_dir):
    """Fit the density estimator to a sample CSV (header + rows)."""
    config = _load_config(config_path)
    seed = _resolve_seed(config, seed)
    src = config.get("input_csv")
    if not src:
        raise click.ClickException("config needs an input_csv field")
    try:
        samples = np.loadtxt(src, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot read samples from {src}: {exc}")
    cfg = dataclasses.replace(_train_cfg(config.get("flow")),
                              seed=substream_seed(seed, "flow"))
    try:
        flow = train_flow(samples, cfg)
    except MssError as exc:
        _emit_report(out_dir, {"status": f"error: {exc}"})
        click.echo(f"error: {exc}", err=True)
        ctx.exit(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_flow(flow, out / "flow.json")
    epochs = [h[0] for h in flow.history]
    best_val = flow.history[-1][3] if flow.history else None
    _emit_report(out_dir, {
        "status": "ok",
        "config": config,
        "n_samples": int(samples.shape[0]),
        "dim": int(samples.shape[1]),
        "epochs_run": int(epochs[-1]) + 1 if epochs else 0,
        "best_val_logp": best_val,
        "files": ["flow.json"],
    })
    click.echo(f"flow fitted on {samples.shape[0]} samples; "
               f"written to {out / 'flow.json'}")
    ctx.exit(0)


# ---------------------------------------------------------------------------
# diagnose


@cli.command()
@_common
@click.pass_context
def diagnose(ctx, config_path, seed, out_dir):
    """Convergence statistics for chains stored on disk."""
    config = _load_config(config_path)
    paths = config.get("chains")
    if not paths and config.get("run_dir"):
        paths = sorted(glob.glob(str(Path(config["run_dir"])
                                     / "stage1" / "chain*.csv")))
    if not paths:
        raise click.ClickException(
            "config needs a chains list or a run_dir")
    try:
        chains = [load_chain(p) for p in paths]
    except (MssError, OSError) as exc:
        _emit_report(out_dir, {"status": f"error: {exc}"})
        click.echo(f"error: {exc}", err=True)
        ctx.exit(1)
    names = chains[0].names
    if any(c.names != names for c in chains[1:]):
        raise click.ClickException("chains disagree on parameter names")
    gates = evaluate_gates(chains, range(len(names)), names,
                           rhat_max=float(config.get("rhat_max", 1.01)),
                           ess_min=float(config.get("ess_min", 400.0)))
    _emit_report(out_dir, {
        "status": "ok" if gates.gates_passed else "gate_failure",
        "chains": list(paths),
        "gates": gates.to_dict(),
    })
    if not gates.gates_passed:
        click.echo("gate failure: " + "; ".join(gates.gate_failures),
                   err=True)
        ctx.exit(2)
    click.echo(f"gates pass for {len(chains)} chains "
               f"({len(names)} coordinates)")
    ctx.exit(0)


# ---------------------------------------------------------------------------
# compare


def _funnel_overlay(config, draws, names, out):
    args = dict(config.get("model_args", {}))
    doc = dict(config.get("compare", {}))
    hyper_sigma = float(args.get("hyper_sigma", 3.0))
    cells = int(doc.get("grid_cells", 60))
    lo, hi = doc.get("bounds", (-4.0 * hyper_sigma, 4.0 * hyper_sigma))
    y = draws[:, names.index("y")]

    if config["model"] == "classic_funnel":
        def oracle_logp(t):
            return float(stats.norm.logpdf(t[0], 0.0, hyper_sigma))

        def oracle_cdf(v):
            return stats.norm.cdf(v, 0.0, hyper_sigma)
    else:
        def oracle_logp(t):
            return float(funnels.likelihood_funnel_analytic_marginal(
                t[0], n_local=int(args.get("n_local", 9)),
                like_mu=float(args.get("like_mu", 2.0)),
                like_sigma=float(args.get("like_sigma", 5.0)),
                hyper_sigma=hyper_sigma))

        fine = np.linspace(lo, hi, 4001)
        logd = np.array([oracle_logp([v]) for v in fine])
        dens = np.exp(logd - logd.max())
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1])
                                               * np.diff(fine))])
        cum /= cum[-1]

        def oracle_cdf(v):
            return np.interp(v, fine, cum)

    grid = grid_density(oracle_logp, [(lo, hi)], n_cells=cells)
    sample_pmf = histogram_pmf(y, grid.edges, max_outside=0.01)
    with open(out / "overlay.csv", "w") as fh:
        fh.write("y,sample_pmf,oracle_pmf\n")
        for c, s, o in zip(grid.centers[0], sample_pmf, grid.pmf):
            fh.write(f"{c:.17g},{s:.17g},{o:.17g}\n")
    return {
        "tv": grid_tv_distance(sample_pmf, grid.pmf),
        "ks": ks_statistic(y, oracle_cdf),
        "mean": float(y.mean()),
        "std": float(y.std()),
    }, ["overlay.csv"]


def _pta_overlay(config, draws, names, out, dataset):
    doc = dict(config.get("compare", {}))
    args = dict(config.get("model_args", {}))
    cells = int(doc.get("grid_cells", 50))
    f_ref = args.get("f_ref")
    cols = np.column_stack([draws[:, names.index("log10_A")],
                            draws[:, names.index("gamma")]])
    prior = ptamodel.pta_hyper_prior(
        amp_bounds=args.get("amp_bounds", ptamodel.AMP_BOUNDS),
        gamma_bounds=args.get("gamma_bounds", ptamodel.GAMMA_BOUNDS))
    bounds = list(zip(prior.space.lower, prior.space.upper))

    def oracle_logp(t):
        return ptamodel.pta_analytic_marginal_logp(dataset, t[0], t[1],
                                                   f_ref=f_ref)

    grid = grid_density(oracle_logp, bounds, n_cells=cells)
    sample_pmf = histogram_pmf(cols, grid.edges, max_outside=0.01)
    with open(out / "overlay_grid.csv", "w") as fh:
        fh.write("log10_A,gamma,sample_pmf,oracle_pmf\n")
        for i, a in enumerate(grid.centers[0]):
            for j, g in enumerate(grid.centers[1]):
                fh.write(f"{a:.17g},{g:.17g},{sample_pmf[i, j]:.17g},"
                         f"{grid.pmf[i, j]:.17g}\n")
    amarg = grid.marginal(0)[1]
    gmarg = grid.marginal(1)[1]
    oracle_mean = [float(np.sum(grid.centers[0] * amarg)),
                   float(np.sum(grid.centers[1] * gmarg))]
    oracle_std = [
        float(np.sqrt(np.sum(grid.centers[0] ** 2 * amarg)
                      - oracle_mean[0] ** 2)),
        float(np.sqrt(np.sum(grid.centers[1] ** 2 * gmarg)
                      - oracle_mean[1] ** 2))]
    return {
        "tv": grid_tv_distance(sample_pmf, grid.pmf),
        "mean": [float(cols[:, 0].mean()), float(cols[:, 1].mean())],
        "std": [float(cols[:, 0].std()), float(cols[:, 1].std())],
        "oracle_mean": oracle_mean,
        "oracle_std": oracle_std,
    }, ["overlay_grid.csv"]


@cli.command()
@_common
@click.pass_context
def compare(ctx, config_path, seed, out_dir):
    """Overlay a stored chain against the model's analytic marginal."""
    config = _load_config(config_path)
    seed = _resolve_seed(config, seed)
    doc = dict(config.get("compare", {}))
    src = doc.get("input_csv")
    if not src:
        raise click.ClickException("config needs compare.input_csv")
    try:
        chain = load_chain(src)
    except (MssError, OSError) as exc:
        _emit_report(out_dir, {"status": f"error: {exc}"})
        click.echo(f"error: {exc}", err=True)
        ctx.exit(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = config.get("model")
    try:
        if model in ("classic_funnel", "likelihood_funnel"):
            comparisons, files = _funnel_overlay(config, chain.draws,
                                                 chain.names, out)
        elif model in ("pta_powerlaw", "pta_freespectral"):
            dataset = _dataset_for(config, seed)
            comparisons, files = _pta_overlay(config, chain.draws,
                                              chain.names, out, dataset)
        else:
            raise click.ClickException(f"unknown model {model!r}")
    except MssError as exc:
        _emit_report(out_dir, {"status": f"error: {exc}"})
        click.echo(f"error: {exc}", err=True)
        ctx.exit(1)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    _emit_report(out_dir, {
        "status": "ok",
        "config": config,
        "comparisons": _jsonable(comparisons),
        "files": files,
    })
    click.echo(f"overlay written to {out / files[0]}")
    ctx.exit(0)


# ---------------------------------------------------------------------------
# entry point


def main(argv=None):
    """Console entry: returns the process exit code."""
    try:
        rv = cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    return int(rv) if isinstance(rv, int) else 0
