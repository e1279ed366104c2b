"""Hamiltonian Monte Carlo with jittered fixed-length trajectories.

The sampler runs in unconstrained coordinates (bounded blocks go
through the logit-affine map from core) with a diagonal mass matrix.
Warmup adapts the step size by dual averaging toward a target
acceptance rate and, in the middle of warmup, re-estimates the mass
from the draw variance; the number of leapfrog steps per trajectory is
drawn uniformly from {1..L} so no single resonant length can stall
mixing.  Trajectory length L tracks a fixed travel distance
PATH_LENGTH / step_size, capped at max_leapfrog.

Draws are returned in the model's own (constrained) coordinates with
the model's own log density, whatever happened internally.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .core import TargetModel, unconstrained_target
from .errors import (AllDivergent, DimensionMismatch, FormatError,
                     InitOutOfSupport, MssError, VersionMismatch)
from .seeding import chain_seeds

PATH_LENGTH = 2.0
DIVERGENCE_DELTA = 1000.0
CHAIN_VERSION = 1

# dual-averaging constants from the standard scheme
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75


@dataclass(frozen=True)
class HMCConfig:
    n_warmup: int = 1000
    n_samples: int = 5000
    target_accept: float = 0.8
    max_leapfrog: int = 1024
    init_step: float = 0.1
    mass_adapt: bool = True
    jitter_steps: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.n_warmup < 0:
            raise ValueError("need n_samples >= 1 and n_warmup >= 0")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must be in (0, 1)")
        if self.init_step <= 0 or self.max_leapfrog < 1:
            raise ValueError("init_step > 0 and max_leapfrog >= 1 required")


@dataclass
class Chain:
    draws: np.ndarray
    logp: np.ndarray
    names: list
    accept_rate: float
    step_size: float
    mass_diag: np.ndarray
    divergences: int
    warmup_divergences: int
    seed: int


def leapfrog(q, p, step, n_steps, grad_fn, mass_diag=None):
    """Volume-preserving integrator for H = -logp(q) + p^2/(2 m).

    grad_fn returns the gradient of logp.  Returns (q, p) after
    n_steps steps of size step.
    """
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    inv_mass = 1.0 if mass_diag is None else 1.0 / np.asarray(mass_diag,
                                                              dtype=float)
    p = p + 0.5 * step * grad_fn(q)
    for k in range(n_steps):
        q = q + step * inv_mass * p
        g = grad_fn(q)
        p = p + (step if k < n_steps - 1 else 0.5 * step) * g
    return q, p


class _DualAveraging:
    def __init__(self, step0, target):
        self.mu = np.log(10.0 * step0)
        self.target = target
        self.log_step = np.log(step0)
        self.log_step_avg = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_prob):
        self.count += 1
        m = self.count
        frac = 1.0 / (m + DA_T0)
        self.h_bar = ((1.0 - frac) * self.h_bar
                      + frac * (self.target - accept_prob))
        self.log_step = self.mu - np.sqrt(m) / DA_GAMMA * self.h_bar
        eta = m ** -DA_KAPPA
        self.log_step_avg = (eta * self.log_step
                             + (1.0 - eta) * self.log_step_avg)

    @property
    def step(self):
        return float(np.exp(self.log_step))

    @property
    def averaged_step(self):
        return float(np.exp(self.log_step_avg)) if self.count else \
            float(np.exp(self.log_step))


def _safe_value_and_grad(model, q):
    """Non-finite regions and bound violations act as zero density."""
    try:
        val, grad = model.value_and_grad(q)
    except MssError:
        return -np.inf, None
    if not np.isfinite(val) or not np.all(np.isfinite(grad)):
        return -np.inf, None
    return float(val), grad


def sample(model: TargetModel, config: HMCConfig, init=None) -> Chain:
    """Run one chain and return draws in the model's own coordinates.

    init, when given, is a point in the model's (constrained) space;
    otherwise the model's prior sampler is used, or the origin of the
    unconstrained space as a last resort.
    """
    inner = unconstrained_target(model)
    st = inner.meta.get("space_transform")
    dim = model.space.dim
    rng = np.random.default_rng(config.seed)

    if init is not None:
        init = np.asarray(init, dtype=float)
        if init.shape != (dim,):
            raise DimensionMismatch(f"init must have shape ({dim},)")
        try:
            q = st.forward(init) if st is not None else \
                model.space.validate(init).copy()
        except MssError as exc:
            raise InitOutOfSupport(str(exc)) from None
    elif inner.prior_sampler is not None:
        q = np.asarray(inner.prior_sampler(rng), dtype=float)
    else:
        q = np.zeros(dim)

    logp_cur, grad_cur = _safe_value_and_grad(inner, q)
    if not np.isfinite(logp_cur):
        raise InitOutOfSupport("chain started where the density vanishes")

    mass = np.ones(dim)
    da = _DualAveraging(config.init_step, config.target_accept)
    step = config.init_step

    n_warmup = config.n_warmup
    three_phase = config.mass_adapt and n_warmup >= 40
    mass_reset_at = (3 * n_warmup) // 4 if three_phase else None
    var_window_start = n_warmup // 2 if three_phase else None
    var_buffer = []

    draws = np.empty((config.n_samples, dim))
    logps = np.empty(config.n_samples)
    warmup_div = 0
    sampling_div = 0
    accepted = 0

    total = n_warmup + config.n_samples
    for it in range(total):
        warming = it < n_warmup
        p = rng.normal(size=dim) * np.sqrt(mass)
        kinetic0 = 0.5 * np.sum(p * p / mass)
        h0 = -logp_cur + kinetic0

        base_steps = min(config.max_leapfrog,
                         max(1, int(round(PATH_LENGTH / step))))
        n_steps = (int(rng.integers(1, base_steps + 1))
                   if config.jitter_steps else base_steps)

        q_new = q
        logp_new, grad_new = logp_cur, grad_cur
        p_new = p + 0.5 * step * grad_cur
        diverged = False
        for k in range(n_steps):
            q_new = q_new + step * p_new / mass
            logp_new, grad_new = _safe_value_and_grad(inner, q_new)
            if grad_new is None:
                diverged = True
                break
            p_new = p_new + (step if k < n_steps - 1 else 0.5 * step) \
                * grad_new

        if diverged:
            accept_prob = 0.0
        else:
            h1 = -logp_new + 0.5 * np.sum(p_new * p_new / mass)
            delta_h = h1 - h0
            if not np.isfinite(delta_h) or abs(delta_h) > DIVERGENCE_DELTA:
                diverged = True
                accept_prob = 0.0
            else:
                accept_prob = min(1.0, float(np.exp(-delta_h)))

        if diverged:
            if warming:
                warmup_div += 1
            else:
                sampling_div += 1

        if not diverged and rng.uniform() < accept_prob:
            q, logp_cur, grad_cur = q_new, logp_new, grad_new
            if not warming:
                accepted += 1

        if warming:
            da.update(accept_prob)
            step = da.step
            if var_window_start is not None and it >= var_window_start \
                    and (mass_reset_at is None or it < mass_reset_at):
                var_buffer.append(q.copy())
            if mass_reset_at is not None and it + 1 == mass_reset_at:
                mass = _regularised_inverse_variance(var_buffer, dim)
                da = _DualAveraging(da.averaged_step, config.target_accept)
                step = da.averaged_step
            if it + 1 == n_warmup:
                step = da.averaged_step
                if n_warmup > 0 and warmup_div > 0.5 * n_warmup:
                    raise AllDivergent(
                        f"{warmup_div}/{n_warmup} warmup trajectories "
                        "diverged; the target looks pathological for "
                        "this kernel")
        else:
            theta = st.inverse(q) if st is not None else q
            draws[it - n_warmup] = theta
            logps[it - n_warmup] = logp_cur - (
                st.log_abs_det_inverse(q) if st is not None else 0.0)

    return Chain(
        draws=draws,
        logp=logps,
        names=list(model.space.names),
        accept_rate=accepted / config.n_samples,
        step_size=float(step),
        mass_diag=mass.copy(),
        divergences=sampling_div,
        warmup_divergences=warmup_div,
        seed=config.seed,
    )


def _regularised_inverse_variance(buffer, dim):
    if len(buffer) < 10:
        return np.ones(dim)
    arr = np.asarray(buffer)
    n = arr.shape[0]
    var = arr.var(axis=0, ddof=1)
    # shrink toward a small floor so constant coordinates stay usable
    var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
    return 1.0 / var


def sample_chains(model: TargetModel, config: HMCConfig, n_chains,
                  inits=None):
    """Run n_chains independent chains with seeds derived from
    config.seed.  Chain k is bit-identical to a standalone sample()
    call with the k-th derived seed."""
    if n_chains < 1:
        raise ValueError("need at least one chain")
    if inits is not None and len(inits) != n_chains:
        raise DimensionMismatch("one init per chain required")
    seeds = chain_seeds(config.seed, n_chains)
    out = []
    for k in range(n_chains):
        init = None if inits is None else inits[k]
        out.append(sample(model, replace(config, seed=seeds[k]), init))
    return out


# ---------------------------------------------------------------------------
# disk format: CSV of draws plus a JSON stats sidecar


def _sidecar_path(csv_path):
    return str(csv_path) + ".json"


def save_chain(chain: Chain, csv_path):
    with open(csv_path, "w") as fh:
        fh.write(",".join(chain.names + ["logp"]) + "\n")
        for row, lp in zip(chain.draws, chain.logp):
            cells = [f"{v:.17g}" for v in row]
            cells.append(f"{lp:.17g}")
            fh.write(",".join(cells) + "\n")
    stats = {
        "version": CHAIN_VERSION,
        "seed": int(chain.seed),
        "accept_rate": chain.accept_rate,
        "step_size": chain.step_size,
        "mass_diag": [float(f"{v:.17g}") for v in chain.mass_diag],
        "divergences": chain.divergences,
        "warmup_divergences": chain.warmup_divergences,
        "names": chain.names,
    }
    with open(_sidecar_path(csv_path), "w") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_chain(csv_path) -> Chain:
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[-1] != "logp":
            raise FormatError("chain CSV must end with a logp column")
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if body.shape[1] != len(header):
        raise FormatError("chain CSV row width does not match header")
    try:
        with open(_sidecar_path(csv_path)) as fh:
            stats = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing sidecar {_sidecar_path(csv_path)}") \
            from None
    if stats.get("version") != CHAIN_VERSION:
        raise VersionMismatch(
            f"chain version {stats.get('version')}, expected "
            f"{CHAIN_VERSION}")
    return Chain(
        draws=body[:, :-1],
        logp=body[:, -1],
        names=header[:-1],
        accept_rate=stats["accept_rate"],
        step_size=stats["step_size"],
        mass_diag=np.asarray(stats["mass_diag"], dtype=float),
        divergences=stats["divergences"],
        warmup_divergences=stats["warmup_divergences"],
        seed=stats["seed"],
    )
