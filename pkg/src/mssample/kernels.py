"""Hot log-density kernels, compiled with numba when available.

Every kernel is written in plain vectorised numpy that numba's nopython
mode also accepts, so the same source serves as the compiled kernel and
as the fallback.  Set the environment variable MSSAMPLE_DISABLE_NUMBA=1
to force the pure-numpy path (useful for debugging and for timing the
speedup; see benchmarks/bench_kernels.py).

Kernels take raw arrays and floats only.  Argument validation, bound
checks and error raising live in the python wrappers (funnels.py,
ptamodel.py); a kernel assumes its inputs are finite and in range.
"""

import os

import numpy as np

LN2PI = np.log(2.0 * np.pi)
LN10 = np.log(10.0)


def _identity_jit(func):
    func.py_func = func
    return func


_disable = os.environ.get("MSSAMPLE_DISABLE_NUMBA", "").strip().lower()
if _disable in ("", "0", "false", "no"):
    try:
        from numba import njit as _njit

        def njit(func):
            return _njit(cache=True)(func)

        NUMBA_ENABLED = True
    except ImportError:
        njit = _identity_jit
        NUMBA_ENABLED = False
else:
    njit = _identity_jit
    NUMBA_ENABLED = False


@njit
def classic_funnel_lpg(x, y, hyper_sigma):
    """Log density and gradient of the funnel with Gaussian hyper prior.

    y ~ N(0, hyper_sigma), x_i | y ~ N(0, exp(y/2)).  Returns
    (logp, grad_x, grad_y).
    """
    n = x.shape[0]
    inv_ey = np.exp(-y)
    sumsq = np.sum(x * x)
    logp = (-0.5 * y * y / (hyper_sigma * hyper_sigma)
            - np.log(hyper_sigma) - 0.5 * LN2PI)
    logp += -0.5 * sumsq * inv_ey - 0.5 * n * y - 0.5 * n * LN2PI
    grad_x = -x * inv_ey
    grad_y = (-y / (hyper_sigma * hyper_sigma)
              + 0.5 * sumsq * inv_ey - 0.5 * n)
    return logp, grad_x, grad_y


@njit
def gaussian_likelihood_lpg(x, mu, sigma):
    """Sum of log N(x_i; mu, sigma) and its gradient in x."""
    n = x.shape[0]
    r = x - mu
    inv_var = 1.0 / (sigma * sigma)
    logp = (-0.5 * np.sum(r * r) * inv_var
            - n * np.log(sigma) - 0.5 * n * LN2PI)
    grad_x = -r * inv_var
    return logp, grad_x


@njit
def generalized_funnel_lpg(x, log10_z, half_width):
    """Log density and gradient of the widened funnel.

    log10 z_i ~ Uniform(-half_width, half_width), x_i | z_i ~ N(0, z_i),
    evaluated in (x, log10 z) coordinates.  Returns
    (logp, grad_x, grad_log10_z).
    """
    n = x.shape[0]
    z = np.exp(LN10 * log10_z)
    t = (x / z) ** 2
    # Gaussian terms: ln z_i = LN10 * log10_z_i
    logp = (-0.5 * np.sum(t) - LN10 * np.sum(log10_z) - 0.5 * n * LN2PI
            - n * np.log(2.0 * half_width))
    grad_x = -x / (z * z)
    grad_u = LN10 * (t - 1.0)
    return logp, grad_x, grad_u


@njit
def pta_quad_lpg(a, ftf, ftd, dtd, sigma):
    """Gaussian residual log likelihood -||d - F a||^2 / (2 sigma^2),
    additive constant dropped, via the precomputed products
    ftf = F^T F, ftd = F^T d, dtd = d^T d.  Returns (loglike, grad_a).
    """
    inv_var = 1.0 / (sigma * sigma)
    fa = np.dot(ftf, a)
    quad = dtd - 2.0 * np.dot(a, ftd) + np.dot(a, fa)
    loglike = -0.5 * quad * inv_var
    grad_a = (ftd - fa) * inv_var
    return loglike, grad_a


@njit
def coeff_prior_lpg(a, phi):
    """Zero-mean Gaussian prior over interleaved (sin, cos) coefficient
    pairs; phi[i] is the per-bin variance shared by both members of
    pair i.  Returns (logp, grad_a, g_phi) with g_phi[i] the derivative
    of logp with respect to phi[i].
    """
    n_bins = phi.shape[0]
    logp = 0.0
    grad_a = np.empty(2 * n_bins)
    g_phi = np.empty(n_bins)
    for i in range(n_bins):
        s = a[2 * i]
        c = a[2 * i + 1]
        ss = s * s + c * c
        logp += -0.5 * ss / phi[i] - np.log(phi[i]) - LN2PI
        grad_a[2 * i] = -s / phi[i]
        grad_a[2 * i + 1] = -c / phi[i]
        g_phi[i] = 0.5 * ss / (phi[i] * phi[i]) - 1.0 / phi[i]
    return logp, grad_a, g_phi


@njit
def pta_powerlaw_lpg(a, log10_amp, gamma, log10_fratio,
                     ftf, ftd, dtd, sigma):
    """Joint log density of the power-law red-noise model in
    (a, log10_amp, gamma), flat hyper prior constants excluded.
    log10_fratio[i] = log10(f_i / f_ref).  Returns
    (logp, grad_a, grad_log10_amp, grad_gamma).
    """
    loglike, grad_a = pta_quad_lpg(a, ftf, ftd, dtd, sigma)
    phi = np.exp(LN10 * (log10_amp - gamma * log10_fratio))
    prior, grad_a_prior, g_phi = coeff_prior_lpg(a, phi)
    grad_a = grad_a + grad_a_prior
    # d phi_i / d log10_amp = LN10 * phi_i,
    # d phi_i / d gamma    = -LN10 * log10_fratio_i * phi_i
    g_amp = LN10 * np.sum(g_phi * phi)
    g_gamma = -LN10 * np.sum(g_phi * phi * log10_fratio)
    return loglike + prior, grad_a, g_amp, g_gamma


@njit
def pta_freespectral_lpg(a, log10_rho, ftf, ftd, dtd, sigma):
    """Joint log density of the free-spectral model in
    (a, log10 rho), flat hyper prior constants excluded.  Returns
    (logp, grad_a, grad_log10_rho).
    """
    loglike, grad_a = pta_quad_lpg(a, ftf, ftd, dtd, sigma)
    rho = np.exp(LN10 * log10_rho)
    prior, grad_a_prior, g_phi = coeff_prior_lpg(a, rho)
    grad_a = grad_a + grad_a_prior
    grad_u = LN10 * g_phi * rho
    return loglike + prior, grad_a, grad_u
