"""Convergence and comparison statistics.

ESS uses the initial monotone positive sequence estimator on the
FFT-computed autocorrelation, R-hat is the split-chain potential scale
reduction, KS compares an empirical CDF against a callable reference,
and grid TV compares normalised histogram masses cell by cell.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, DegenerateChain, DimensionMismatch


def autocorrelation(x):
    """Normalised autocorrelation of a 1-d sequence via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    centred = x - x.mean()
    var = centred @ centred
    if var == 0:
        raise DegenerateChain("constant sequence has no autocorrelation")
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centred, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / acov[0]


def ess(x):
    """Effective sample size of one sequence.

    Pairs of autocorrelations rho_{2k} + rho_{2k+1} are summed while
    positive and forced non-increasing, which truncates the noisy tail
    of the estimated autocorrelation instead of summing it.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        raise DegenerateChain("need at least 4 draws for an ESS estimate")
    rho = autocorrelation(x)
    pair_sums = []
    k = 0
    while 2 * k + 1 < n:
        g = rho[2 * k] + rho[2 * k + 1]
        if g <= 0:
            break
        if pair_sums and g > pair_sums[-1]:
            g = pair_sums[-1]
        pair_sums.append(g)
        k += 1
    tau = max(-1.0 + 2.0 * sum(pair_sums), 1.0 / n)
    return float(n / tau)


def combined_ess(chains):
    """Sum of per-chain ESS values for same-length chains."""
    return float(sum(ess(c) for c in chains))


def split_rhat(chains):
    """Potential scale reduction with each chain split in half, so a
    single drifting chain is caught even when chains agree."""
    chains = [np.asarray(c, dtype=float) for c in chains]
    if len(chains) < 1:
        raise DimensionMismatch("need at least one chain")
    n = min(c.size for c in chains)
    half = n // 2
    if half < 2:
        raise DegenerateChain("chains too short to split")
    parts = []
    for c in chains:
        parts.append(c[:half])
        parts.append(c[half:2 * half])
    parts = np.asarray(parts)
    within = parts.var(axis=1, ddof=1).mean()
    if within == 0:
        raise DegenerateChain("zero within-chain variance")
    between = half * parts.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * within + between / half
    return float(np.sqrt(var_plus / within))


def ks_statistic(samples, cdf):
    """Kolmogorov-Smirnov distance between an empirical sample and a
    reference CDF given as a vectorised callable."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise DimensionMismatch("no samples")
    f = np.asarray(cdf(x), dtype=float)
    grid = np.arange(1, n + 1) / n
    return float(max(np.max(grid - f), np.max(f - (grid - 1.0 / n))))


# ---------------------------------------------------------------------------
# grid comparisons


def histogram_pmf(samples, edges, max_outside=0.01):
    """Normalised histogram mass on a rectangular grid.

    samples is (n,) or (n, d); edges is one bin-edge array per
    dimension.  More than max_outside of the samples falling off the
    grid raises CoverageError, under that the strays are dropped and
    the inside mass renormalised.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.ndim != 2:
        raise DimensionMismatch("samples must be (n,) or (n, d)")
    if len(edges) != samples.shape[1]:
        raise DimensionMismatch("one edge array per dimension required")
    hist, _ = np.histogramdd(samples, bins=edges)
    n = samples.shape[0]
    inside = hist.sum()
    if inside < (1.0 - max_outside) * n:
        raise CoverageError(
            f"{n - int(inside)} of {n} samples fall outside the grid")
    return hist / inside


def pmf_from_log_density(log_density_grid):
    """Normalise a grid of log densities into cell masses."""
    g = np.asarray(log_density_grid, dtype=float)
    out = np.exp(g - g.max())
    return out / out.sum()


def grid_tv_distance(p, q):
    """Total variation distance between two grid pmfs."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionMismatch("pmf shapes differ")
    return float(0.5 * np.abs(p - q).sum())


def tv_between_samples(a, b, edges, max_outside=0.01):
    return grid_tv_distance(histogram_pmf(a, edges, max_outside),
                            histogram_pmf(b, edges, max_outside))


# ---------------------------------------------------------------------------
# report container


@dataclass
class DiagnosticsReport:
    """Per-run summary serialised into report.json."""

    rhat: dict = field(default_factory=dict)
    ess: dict = field(default_factory=dict)
    accept_rate: dict = field(default_factory=dict)
    step_size: dict = field(default_factory=dict)
    divergences: dict = field(default_factory=dict)
    gates_passed: bool = True
    gate_failures: list = field(default_factory=list)
    comparisons: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "rhat": self.rhat,
            "ess": self.ess,
            "accept_rate": self.accept_rate,
            "step_size": self.step_size,
            "divergences": self.divergences,
            "gates_passed": self.gates_passed,
            "gate_failures": list(self.gate_failures),
            "comparisons": self.comparisons,
        }


def evaluate_gates(chains, param_indices, names, rhat_max=1.01,
                   ess_min=400.0):
    """Fill a DiagnosticsReport for the given coordinates of a chain
    batch and record any gate violations."""
    report = DiagnosticsReport()
    for idx in param_indices:
        name = names[idx]
        cols = [c.draws[:, idx] for c in chains]
        r = split_rhat(cols)
        e = combined_ess(cols)
        report.rhat[name] = r
        report.ess[name] = e
        if r > rhat_max:
            report.gate_failures.append(
                f"rhat[{name}] = {r:.4f} > {rhat_max}")
        if e < ess_min:
            report.gate_failures.append(
                f"ess[{name}] = {e:.1f} < {ess_min}")
    for k, c in enumerate(chains):
        report.accept_rate[f"chain{k}"] = c.accept_rate
        report.step_size[f"chain{k}"] = c.step_size
        report.divergences[f"chain{k}"] = c.divergences
    report.gates_passed = not report.gate_failures
    return report
