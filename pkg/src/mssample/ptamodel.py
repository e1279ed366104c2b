"""Hierarchical red-noise targets over Fourier coefficients.

Two spectral parameterisations share one Gaussian residual likelihood:

* power-law: per-bin coefficient variance phi_i = A (f_i/f_ref)^-gamma
  with two hyper parameters (log10_A, gamma);
* free-spectral: one log10 rho_i per bin, each bin's variance its own
  hyper parameter.

The power-law hyper space embeds into the free-spectral one along
log10 rho_i = log10_A - gamma log10(f_i/f_ref), an affine map that is
injective as soon as two modelled frequencies differ.  Because the
noise is Gaussian the coefficient block integrates out exactly, giving
a closed-form hyper marginal used as the comparison oracle.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import kernels
from .core import ConstraintMap, Param, ParameterSpace, TargetModel
from .errors import (DegenerateFrequencies, DimensionMismatch,
                     NonPositiveAmplitude, NonPositiveVariance,
                     NumericalSingular)
from .ptasim import PTADataset, power_law_variances

AMP_BOUNDS = (-2.0, 2.0)
GAMMA_BOUNDS = (0.0, 7.0)
RHO_BOUNDS = (-8.0, 4.0)


def pta_loglike(dataset: PTADataset, a):
    """Residual log likelihood -||d - F a||^2 / (2 sigma^2) with the
    data-only constant dropped."""
    a = _check_coeff(dataset, a)
    ftf, ftd, dtd = dataset.products
    val, _ = kernels.pta_quad_lpg(a, ftf, ftd, dtd, dataset.sigma)
    return float(val)


def pta_loglike_grad(dataset: PTADataset, a):
    a = _check_coeff(dataset, a)
    ftf, ftd, dtd = dataset.products
    _, grad = kernels.pta_quad_lpg(a, ftf, ftd, dtd, dataset.sigma)
    return grad


def pta_coeff_prior_logp(a, phi):
    """Zero-mean Gaussian prior on interleaved (sin, cos) pairs; each
    phi_i is counted once per member of its pair."""
    a = np.asarray(a, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if a.ndim != 1 or phi.ndim != 1 or a.size != 2 * phi.size:
        raise DimensionMismatch("need len(a) == 2 * len(phi)")
    if np.any(phi <= 0):
        raise NonPositiveVariance("phi must be positive")
    val, _, _ = kernels.coeff_prior_lpg(a, phi)
    return float(val)


def _check_coeff(dataset, a):
    a = np.asarray(a, dtype=float)
    if a.shape != (2 * dataset.n_freq,):
        raise DimensionMismatch(
            f"expected {2 * dataset.n_freq} coefficients, got {a.shape}")
    return a


def _log10_fratio(dataset, f_ref=None):
    f_ref = dataset.f_ref if f_ref is None else float(f_ref)
    if f_ref <= 0:
        raise NonPositiveAmplitude("f_ref must be positive")
    return np.log10(dataset.freqs / f_ref)


# ---------------------------------------------------------------------------
# TargetModel builders


def _coeff_params(n_freq):
    out = []
    for i in range(1, n_freq + 1):
        out.append(Param(f"sin{i}"))
        out.append(Param(f"cos{i}"))
    return out


def pta_powerlaw_model(dataset: PTADataset, amp_bounds=AMP_BOUNDS,
                       gamma_bounds=GAMMA_BOUNDS, f_ref=None):
    """Joint model over (coefficients, log10_A, gamma) with flat hyper
    priors on the stated boxes.

    f_ref anchors the amplitude; it defaults to the dataset convention
    1/span (the lowest modelled frequency).  Timing analyses usually
    quote amplitudes at 1/yr instead, which for multi-year spans sits
    at or above the top of the modelled band.
    """
    n_freq = dataset.n_freq
    params = _coeff_params(n_freq)
    params.append(Param("log10_A", *amp_bounds, block="hyper"))
    params.append(Param("gamma", *gamma_bounds, block="hyper"))
    space = ParameterSpace(params)
    ftf, ftd, dtd = dataset.products
    lfr = _log10_fratio(dataset, f_ref)
    f_ref_eff = dataset.f_ref if f_ref is None else float(f_ref)
    # flat hyper prior normalisation over the box
    prior_const = -np.log(amp_bounds[1] - amp_bounds[0]) \
        - np.log(gamma_bounds[1] - gamma_bounds[0])
    k = 2 * n_freq

    def fused(theta):
        theta = space.validate(theta)
        a, log10_amp, gamma = theta[:k], theta[k], theta[k + 1]
        logp, ga, gamp, ggam = kernels.pta_powerlaw_lpg(
            a, log10_amp, gamma, lfr, ftf, ftd, dtd, dataset.sigma)
        grad = np.empty(k + 2)
        grad[:k] = ga
        grad[k] = gamp
        grad[k + 1] = ggam
        return float(logp) + prior_const, grad

    def prior_sampler(rng):
        log10_amp = rng.uniform(*amp_bounds)
        gamma = rng.uniform(*gamma_bounds)
        phi = power_law_variances(10.0 ** log10_amp, gamma,
                                  dataset.freqs, f_ref_eff)
        a = rng.normal(size=k) * np.sqrt(np.repeat(phi, 2))
        return np.concatenate([a, [log10_amp, gamma]])

    return TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=prior_sampler,
        kind="pta_powerlaw",
        meta={"dataset": dataset, "amp_bounds": tuple(amp_bounds),
              "gamma_bounds": tuple(gamma_bounds), "f_ref": f_ref_eff},
    )


def pta_freespectral_model(dataset: PTADataset, rho_bounds=RHO_BOUNDS):
    """Joint model over (coefficients, log10 rho per bin) with flat
    priors on each log10 rho."""
    n_freq = dataset.n_freq
    params = _coeff_params(n_freq)
    params += [Param(f"log10_rho{i}", *rho_bounds, block="hyper")
               for i in range(1, n_freq + 1)]
    space = ParameterSpace(params)
    ftf, ftd, dtd = dataset.products
    prior_const = -n_freq * np.log(rho_bounds[1] - rho_bounds[0])
    k = 2 * n_freq

    def fused(theta):
        theta = space.validate(theta)
        a, log10_rho = theta[:k], theta[k:]
        logp, ga, gu = kernels.pta_freespectral_lpg(
            a, log10_rho, ftf, ftd, dtd, dataset.sigma)
        return float(logp) + prior_const, np.concatenate([ga, gu])

    def prior_sampler(rng):
        log10_rho = rng.uniform(*rho_bounds, size=n_freq)
        a = rng.normal(size=k) * np.power(10.0, np.repeat(log10_rho, 2) / 2)
        return np.concatenate([a, log10_rho])

    return TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=prior_sampler,
        kind="pta_freespectral",
        meta={"dataset": dataset, "rho_bounds": tuple(rho_bounds)},
    )


def pta_hyper_prior(amp_bounds=AMP_BOUNDS, gamma_bounds=GAMMA_BOUNDS):
    """Flat prior over the power-law hyper box (log10_A, gamma)."""
    space = ParameterSpace([
        Param("log10_A", *amp_bounds, block="hyper"),
        Param("gamma", *gamma_bounds, block="hyper"),
    ])
    const = -np.log(amp_bounds[1] - amp_bounds[0]) \
        - np.log(gamma_bounds[1] - gamma_bounds[0])

    def fused(theta):
        theta = space.validate(theta)
        return const, np.zeros(2)

    def prior_sampler(rng):
        return np.array([rng.uniform(*amp_bounds),
                         rng.uniform(*gamma_bounds)])

    return TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=prior_sampler,
        kind="pta_hyper_prior",
        meta={"amp_bounds": tuple(amp_bounds),
              "gamma_bounds": tuple(gamma_bounds)},
    )


def pta_constraint(dataset: PTADataset, f_ref=None) -> ConstraintMap:
    """Affine embedding of (log10_A, gamma) into per-bin log10 rho:
    log10 rho_i = log10_A - gamma * log10(f_i / f_ref)."""
    lfr = _log10_fratio(dataset, f_ref)
    if lfr.size < 2 or np.unique(lfr).size < 2:
        raise DegenerateFrequencies(
            "need at least two distinct frequencies for an injective map")
    jac = np.column_stack([np.ones_like(lfr), -lfr])

    def func(y):
        y = np.asarray(y, dtype=float)
        if y.shape != (2,):
            raise DimensionMismatch("constraint input must be (log10_A, "
                                    "gamma)")
        return y[0] - y[1] * lfr

    return ConstraintMap(name="pta_powerlaw", in_dim=2, out_dim=lfr.size,
                         func=func, jacobian=lambda y: jac)


# ---------------------------------------------------------------------------
# closed-form hyper marginal


def pta_analytic_marginal_logp(dataset: PTADataset, log10_amp, gamma,
                               f_ref=None):
    """log N(d; 0, sigma^2 I + F Phi F^T) with the coefficient block
    integrated out, evaluated through the 2*n_freq inner form so the
    cost never scales with the number of observations."""
    amp = 10.0 ** float(log10_amp)
    if not np.isfinite(amp) or amp <= 0:
        raise NonPositiveAmplitude("amplitude must be positive and finite")
    f_ref = dataset.f_ref if f_ref is None else float(f_ref)
    phi = power_law_variances(amp, float(gamma), dataset.freqs, f_ref)
    return _marginal_from_phi(dataset, np.repeat(phi, 2))


def pta_freespectral_marginal_logp(dataset: PTADataset, log10_rho):
    """Same marginal with per-bin variances 10**log10_rho."""
    log10_rho = np.asarray(log10_rho, dtype=float)
    if log10_rho.shape != (dataset.n_freq,):
        raise DimensionMismatch("need one log10 rho per bin")
    return _marginal_from_phi(dataset,
                              np.repeat(np.power(10.0, log10_rho), 2))


def _marginal_from_phi(dataset, phi2):
    if np.any(phi2 <= 0) or not np.all(np.isfinite(phi2)):
        raise NonPositiveVariance("per-coefficient variances must be "
                                  "positive and finite")
    ftf, ftd, dtd = dataset.products
    sig2 = dataset.sigma ** 2
    n = dataset.times.size
    s = ftf / sig2 + np.diag(1.0 / phi2)
    try:
        cho = cho_factor(s, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalSingular(f"inner matrix not positive definite: "
                                f"{exc}") from None
    b = ftd / sig2
    quad = dtd / sig2 - b @ cho_solve(cho, b)
    logdet = (n * np.log(sig2) + np.sum(np.log(phi2))
              + 2.0 * np.sum(np.log(np.diag(cho[0]))))
    return float(-0.5 * (n * kernels.LN2PI + logdet + quad))
