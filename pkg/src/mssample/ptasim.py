"""Simulated irregularly-sampled time series with power-law red noise.

A dataset is d = F a + n where F holds interleaved sine/cosine columns
at harmonics of 1/T (T the realised observation span), the Fourier
coefficients a are drawn from a power-law spectrum and n is white
Gaussian measurement noise.  Times, coefficients and noise each get
their own RNG substream so changing one draw never shifts the others.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import (DegenerateSpan, FormatError, JitterCollision,
                     VersionMismatch)

DATASET_VERSION = 1


@dataclass(frozen=True)
class SimConfig:
    n_samples: int = 500
    span: float = 1.0
    jitter_frac: float = 0.3
    sigma: float = 1.0
    n_freq: int = 10
    true_log10_amp: float = 0.5
    true_gamma: float = 13.0 / 3.0


class PTADataset:
    """Observation times, data vector and noise level, plus the cached
    Fourier-basis products every likelihood evaluation reuses."""

    def __init__(self, times, data, sigma, n_freq, truth=None):
        times = np.asarray(times, dtype=float)
        data = np.asarray(data, dtype=float)
        if times.ndim != 1 or times.shape != data.shape:
            raise FormatError("times and data must be 1-d of equal length")
        if np.any(np.diff(times) <= 0):
            raise JitterCollision("times must be strictly increasing")
        if sigma <= 0:
            raise FormatError("sigma must be positive")
        if n_freq < 1:
            raise FormatError("n_freq must be at least 1")
        self.times = times
        self.data = data
        self.sigma = float(sigma)
        self.n_freq = int(n_freq)
        self.truth = dict(truth) if truth else None
        self._design = None
        self._products = None

    @property
    def span(self):
        return float(self.times[-1] - self.times[0])

    @property
    def freqs(self):
        return np.arange(1, self.n_freq + 1) / self.span

    @property
    def f_ref(self):
        return 1.0 / self.span

    @property
    def design(self):
        if self._design is None:
            self._design = fourier_design_matrix(self.times, self.n_freq)
        return self._design

    @property
    def products(self):
        """(F^T F, F^T d, d^T d), precomputed once; all model and
        reparameterisation code paths work from these."""
        if self._products is None:
            f = self.design
            self._products = (f.T @ f, f.T @ self.data,
                              float(self.data @ self.data))
        return self._products


def generate_times(config: SimConfig, rng) -> np.ndarray:
    """Nominally even grid over the span with uniform jitter on each
    tick.  jitter_frac >= 0.5 can reorder ticks; that raises rather
    than silently sorting."""
    n = config.n_samples
    delta = config.span / n
    base = np.arange(n) * delta
    jitter = rng.uniform(-config.jitter_frac * delta,
                         config.jitter_frac * delta, size=n)
    times = base + jitter
    if np.any(np.diff(times) <= 0):
        raise JitterCollision(
            f"jitter_frac={config.jitter_frac} produced a non-increasing "
            "time grid")
    return times


def fourier_design_matrix(times, n_freq) -> np.ndarray:
    """N x 2*n_freq matrix with columns sin(2 pi k t'/T), cos(2 pi k
    t'/T) interleaved per harmonic k=1..n_freq, where t' = t - t[0]
    and T is the realised span.  The first row is therefore
    (0, 1, 0, 1, ...).
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise DegenerateSpan("need at least two observation times")
    span = times[-1] - times[0]
    if span <= 0:
        raise DegenerateSpan("observation span must be positive")
    if n_freq < 1:
        raise FormatError("n_freq must be at least 1")
    shifted = times - times[0]
    k = np.arange(1, n_freq + 1)
    phases = 2.0 * np.pi * np.outer(shifted, k) / span
    out = np.empty((times.size, 2 * n_freq))
    out[:, 0::2] = np.sin(phases)
    out[:, 1::2] = np.cos(phases)
    return out


def power_law_variances(amp, gamma, freqs, f_ref):
    """Per-bin coefficient variance amp * (f/f_ref)^(-gamma)."""
    return amp * np.power(np.asarray(freqs, dtype=float) / f_ref, -gamma)


def simulate_dataset(config: SimConfig, seed) -> PTADataset:
    """Draw times, power-law Fourier coefficients and white noise, each
    from its own substream of seed."""
    streams = np.random.SeedSequence(seed).spawn(3)
    rng_times = np.random.default_rng(streams[0])
    rng_coeff = np.random.default_rng(streams[1])
    rng_noise = np.random.default_rng(streams[2])

    times = generate_times(config, rng_times)
    span = times[-1] - times[0]
    freqs = np.arange(1, config.n_freq + 1) / span
    phi = power_law_variances(10.0 ** config.true_log10_amp,
                              config.true_gamma, freqs, 1.0 / span)
    coeff = rng_coeff.normal(size=2 * config.n_freq) * np.sqrt(
        np.repeat(phi, 2))
    design = fourier_design_matrix(times, config.n_freq)
    data = design @ coeff + rng_noise.normal(0.0, config.sigma,
                                             size=config.n_samples)
    truth = {"log10_A": config.true_log10_amp,
             "gamma": config.true_gamma,
             "seed": int(seed)}
    return PTADataset(times, data, config.sigma, config.n_freq, truth)


# ---------------------------------------------------------------------------
# disk formats


def _fmt(x):
    return float(format(float(x), ".17g"))


def save_dataset(dataset: PTADataset, path):
    doc = {
        "version": DATASET_VERSION,
        "times": [_fmt(t) for t in dataset.times],
        "data": [_fmt(d) for d in dataset.data],
        "sigma": _fmt(dataset.sigma),
        "n_freq": dataset.n_freq,
        "truth": dataset.truth,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> PTADataset:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise FormatError("dataset file lacks a version field")
    if doc["version"] != DATASET_VERSION:
        raise VersionMismatch(
            f"dataset version {doc['version']}, expected {DATASET_VERSION}")
    try:
        return PTADataset(doc["times"], doc["data"], doc["sigma"],
                          doc["n_freq"], doc.get("truth"))
    except KeyError as exc:
        raise FormatError(f"dataset file missing field {exc}") from None


def export_csv(dataset: PTADataset, path):
    """Two-column t,d export for plotting tools."""
    with open(path, "w") as fh:
        fh.write("t,d\n")
        for t, d in zip(dataset.times, dataset.data):
            fh.write(f"{t:.17g},{d:.17g}\n")


def sim_config_to_dict(config: SimConfig) -> dict:
    return asdict(config)


def sim_config_from_dict(doc: dict) -> SimConfig:
    known = {f for f in SimConfig.__dataclass_fields__}
    extra = set(doc) - known
    if extra:
        raise FormatError(f"unknown sim config fields: {sorted(extra)}")
    return SimConfig(**doc)
