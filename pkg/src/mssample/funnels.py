"""Funnel-shaped hierarchical targets and their analytic companions.

Two parameterisations of the same phenomenon:

* the classic funnel: y ~ N(0, hyper_sigma), x_i | y ~ N(0, exp(y/2)),
  whose local scales collapse as y falls;
* a widened stand-in where each local coordinate gets its own scale,
  log10 z_i ~ Uniform(-half_width, half_width), x_i | z_i ~ N(0, z_i),
  sampled in (x, log10 z) coordinates.

The classic hyper space embeds into the widened one along the line
log10 z_i = (y/2) log10(e), which is what funnel_constraint encodes.
An optional Gaussian measurement term N(x_i; like_mu, like_sigma) can
be attached to either parameterisation; its x-marginal is available in
closed form for cross-checking.
"""

import numpy as np

from . import kernels
from .core import ConstraintMap, Param, ParameterSpace, TargetModel
from .errors import DimensionMismatch, NonPositiveVariance

LOG10E = np.log10(np.e)


def _check_pair(x, y_or_u, n_expected=None):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatch("x must be a 1-d array")
    if n_expected is not None and x.shape[0] != n_expected:
        raise DimensionMismatch(
            f"expected {n_expected} local coordinates, got {x.shape[0]}")
    return x, y_or_u


def classic_funnel_logp(x, y, hyper_sigma=3.0):
    x, y = _check_pair(x, float(y))
    if hyper_sigma <= 0:
        raise NonPositiveVariance("hyper_sigma must be positive")
    logp, _, _ = kernels.classic_funnel_lpg(x, y, hyper_sigma)
    return float(logp)


def classic_funnel_grad(x, y, hyper_sigma=3.0):
    """Gradient of classic_funnel_logp, returned as (grad_x, grad_y)."""
    x, y = _check_pair(x, float(y))
    if hyper_sigma <= 0:
        raise NonPositiveVariance("hyper_sigma must be positive")
    _, gx, gy = kernels.classic_funnel_lpg(x, y, hyper_sigma)
    return gx, float(gy)


def generalized_funnel_logp(x, log10_z, half_width=4.0):
    x = np.asarray(x, dtype=float)
    log10_z = np.asarray(log10_z, dtype=float)
    if x.shape != log10_z.shape or x.ndim != 1:
        raise DimensionMismatch("x and log10_z must be 1-d of equal length")
    _space_for_generalized(x.shape[0], half_width).validate(
        np.concatenate([x, log10_z]))
    logp, _, _ = kernels.generalized_funnel_lpg(x, log10_z, half_width)
    return float(logp)


def generalized_funnel_grad(x, log10_z, half_width=4.0):
    x = np.asarray(x, dtype=float)
    log10_z = np.asarray(log10_z, dtype=float)
    if x.shape != log10_z.shape or x.ndim != 1:
        raise DimensionMismatch("x and log10_z must be 1-d of equal length")
    _, gx, gu = kernels.generalized_funnel_lpg(x, log10_z, half_width)
    return gx, gu


def likelihood_funnel_logp(x, y, like_mu=2.0, like_sigma=5.0,
                           hyper_sigma=3.0):
    """Classic funnel plus an independent Gaussian measurement of each
    local coordinate."""
    base = classic_funnel_logp(x, y, hyper_sigma)
    x = np.asarray(x, dtype=float)
    ll, _ = kernels.gaussian_likelihood_lpg(x, like_mu, like_sigma)
    return base + float(ll)


def likelihood_funnel_grad(x, y, like_mu=2.0, like_sigma=5.0,
                           hyper_sigma=3.0):
    gx, gy = classic_funnel_grad(x, y, hyper_sigma)
    x = np.asarray(x, dtype=float)
    _, gl = kernels.gaussian_likelihood_lpg(x, like_mu, like_sigma)
    return gx + gl, gy


def likelihood_funnel_analytic_marginal(y, n_local=9, like_mu=2.0,
                                        like_sigma=5.0, hyper_sigma=3.0):
    """Log marginal density of y with every x_i integrated out.

    Each local factor is a Gaussian convolution:
    int N(x; mu, s) N(x; 0, e^{y/2}) dx = N(mu; 0, sqrt(s^2 + e^y)),
    so the marginal is available exactly.  Vectorised over y.
    """
    y = np.asarray(y, dtype=float)
    var = like_sigma ** 2 + np.exp(y)
    per_comp = (-0.5 * like_mu ** 2 / var - 0.5 * np.log(var)
                - 0.5 * kernels.LN2PI)
    hyper = (-0.5 * (y / hyper_sigma) ** 2 - np.log(hyper_sigma)
             - 0.5 * kernels.LN2PI)
    out = hyper + n_local * per_comp
    return float(out) if out.ndim == 0 else out


def funnel_constraint(n_local=9, half_width=4.0):
    """Embedding of the classic hyper parameter into the widened hyper
    space: log10 z_i = (y/2) log10(e) for every i."""
    slope = 0.5 * LOG10E

    def func(y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.shape != (1,):
            raise DimensionMismatch("constraint input must be scalar y")
        return np.full(n_local, slope * y[0])

    def jac(y):
        return np.full((n_local, 1), slope)

    return ConstraintMap(name="funnel", in_dim=1, out_dim=n_local,
                         func=func, jacobian=jac)


# ---------------------------------------------------------------------------
# TargetModel builders


def _space_for_classic(n_local):
    params = [Param(f"x{i + 1}") for i in range(n_local)]
    params.append(Param("y", block="hyper"))
    return ParameterSpace(params)


def _space_for_generalized(n_local, half_width):
    params = [Param(f"x{i + 1}") for i in range(n_local)]
    params += [Param(f"log10_z{i + 1}", lower=-half_width,
                     upper=half_width, block="hyper")
               for i in range(n_local)]
    return ParameterSpace(params)


def classic_funnel_model(n_local=9, hyper_sigma=3.0, likelihood=None):
    """Classic funnel as a TargetModel over (x_1..x_n, y).

    likelihood, when given, is a (mu, sigma) pair attaching the
    Gaussian measurement term to each local coordinate.
    """
    space = _space_for_classic(n_local)

    def fused(theta):
        theta = space.validate(theta)
        x, y = theta[:n_local], theta[n_local]
        logp, gx, gy = kernels.classic_funnel_lpg(x, y, hyper_sigma)
        if likelihood is not None:
            mu, sig = likelihood
            ll, gl = kernels.gaussian_likelihood_lpg(x, mu, sig)
            logp += ll
            gx = gx + gl
        grad = np.empty(n_local + 1)
        grad[:n_local] = gx
        grad[n_local] = gy
        return float(logp), grad

    def prior_sampler(rng):
        y = rng.normal(0.0, hyper_sigma)
        x = rng.normal(0.0, np.exp(0.5 * y), size=n_local)
        return np.concatenate([x, [y]])

    return TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=prior_sampler,
        kind="classic_funnel",
        meta={"n_local": n_local, "hyper_sigma": hyper_sigma,
              "likelihood": likelihood},
    )


def likelihood_funnel_model(n_local=9, hyper_sigma=3.0,
                            like_mu=2.0, like_sigma=5.0):
    return classic_funnel_model(n_local, hyper_sigma,
                                likelihood=(like_mu, like_sigma))


def generalized_funnel_model(n_local=9, half_width=4.0, likelihood=None):
    """Widened funnel as a TargetModel over (x_1..x_n, log10_z_1..n)."""
    space = _space_for_generalized(n_local, half_width)

    def fused(theta):
        theta = space.validate(theta)
        x, u = theta[:n_local], theta[n_local:]
        logp, gx, gu = kernels.generalized_funnel_lpg(x, u, half_width)
        if likelihood is not None:
            mu, sig = likelihood
            ll, gl = kernels.gaussian_likelihood_lpg(x, mu, sig)
            logp += ll
            gx = gx + gl
        return float(logp), np.concatenate([gx, gu])

    def prior_sampler(rng):
        u = rng.uniform(-half_width, half_width, size=n_local)
        x = rng.normal(0.0, 1.0, size=n_local) * np.power(10.0, u)
        return np.concatenate([x, u])

    return TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=prior_sampler,
        kind="generalized_funnel",
        meta={"n_local": n_local, "half_width": half_width,
              "likelihood": likelihood},
    )


def funnel_hyper_prior(hyper_sigma=3.0):
    """The original 1-d hyper prior p(y), used to reweight the widened
    hyper density when collapsing back onto the constraint line."""
    space = ParameterSpace([Param("y", block="hyper")])
    inv_var = 1.0 / hyper_sigma ** 2

    def fused(theta):
        theta = space.validate(theta)
        y = theta[0]
        logp = (-0.5 * y * y * inv_var - np.log(hyper_sigma)
                - 0.5 * kernels.LN2PI)
        return float(logp), np.array([-y * inv_var])

    return TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=lambda rng: np.array([rng.normal(0.0, hyper_sigma)]),
        kind="funnel_hyper_prior",
        meta={"hyper_sigma": hyper_sigma},
    )
