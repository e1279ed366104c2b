"""Reparameterization schemes that wrap a target model for sampling.

Hierarchical targets put the sampler in an impossible position: the
local coordinates shrink or grow with the hyper-parameters, so no fixed
step size works everywhere.  The wrappers here move the problem into a
standardized space where the local block has unit scale, sample there,
and push draws back through the (hyper-dependent) change of variables.

Three schemes are provided:

* ``ns_target``   -- no reparameterization at all, the failure baseline.
* ``prs_target``  -- locals are whitened by their conditional *prior*
  scale (``x = scale(hyper) * x_hat``); exact for pure hierarchies,
  approximate once a likelihood term is present.
* ``cprs_target`` -- locals are colored by the exact Gaussian
  *posterior* conditional ``a = mean(hyper) + L(hyper) @ a_hat``; only
  available for the linear-Gaussian timing models, where that
  conditional is known in closed form.

Every wrapper returns a :class:`ReparamTarget` carrying the inner model
to sample, the pushforward back to native coordinates, and the
log-Jacobian of the pushforward, tied together by the identity
``inner_logp(u) - logdet(u) == native_logp(pushforward(u))``.
"""

import dataclasses
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, LinAlgError

from .core import Param, ParameterSpace, TargetModel
from .errors import (DimensionMismatch, NonPositiveVariance,
                     NumericalSingular, UnsupportedModel)
from .kernels import LN10


@dataclasses.dataclass(frozen=True)
class ReparamTarget:
    """A sampling problem restated in standardized coordinates.

    Attributes
    ----------
    inner : TargetModel
        The model the sampler actually runs on.
    pushforward : callable
        Maps a matrix of standardized draws to native draws, row-wise.
    logdet_rule : callable
        Log absolute Jacobian determinant of the pushforward, one value
        per row of standardized draws.
    scheme : str
        One of ``"ns"``, ``"prs"``, ``"cprs"``.
    native : TargetModel
        The model the draws ultimately describe.
    """

    inner: TargetModel
    pushforward: Callable[[np.ndarray], np.ndarray]
    logdet_rule: Callable[[np.ndarray], np.ndarray]
    scheme: str
    native: TargetModel


def ns_target(model: TargetModel) -> ReparamTarget:
    """Identity wrapper: sample the native model as-is.

    Exists so every scheme runs through one harness.  Expected to fail
    on funnel-shaped targets; that failure is part of the comparison.
    """

    def pushforward(draws):
        return np.atleast_2d(np.asarray(draws, dtype=float)).copy()

    def logdet_rule(draws):
        draws = np.atleast_2d(draws)
        return np.zeros(draws.shape[0])

    return ReparamTarget(inner=model, pushforward=pushforward,
                         logdet_rule=logdet_rule, scheme="ns", native=model)


def _hat_params(space: ParameterSpace, local_idx):
    """Unbounded stand-ins for the local block, native hypers kept."""
    params = []
    for i, name in enumerate(space.names):
        if i in local_idx:
            params.append(Param(f"{name}_hat", block="local"))
        else:
            params.append(Param(name, space.lower[i], space.upper[i],
                                block="hyper"))
    return params


def _funnel_prs(model: TargetModel) -> ReparamTarget:
    # x_i = exp(y/2) x_hat_i and y = hyper_sigma * y_hat; the pure
    # funnel becomes an exact standard normal in these coordinates
    n = model.meta["n_local"]
    sig_y = model.meta["hyper_sigma"]
    space = ParameterSpace([Param(f"x{i}_hat") for i in range(1, n + 1)]
                           + [Param("y_hat", block="hyper")])

    def fused(theta_hat):
        theta_hat = space.validate(theta_hat)
        x_hat, y_hat = theta_hat[:n], theta_hat[n]
        y = sig_y * y_hat
        scale = np.exp(0.5 * y)
        x = scale * x_hat
        logp, grad = model.value_and_grad(np.concatenate([x, [y]]))
        logdet = np.log(sig_y) + 0.5 * n * y
        g_x, g_y = grad[:n], grad[n]
        out = np.empty(n + 1)
        out[:n] = g_x * scale
        out[n] = sig_y * (g_y + 0.5 * np.dot(g_x, x) + 0.5 * n)
        return logp + logdet, out

    def pushforward(draws):
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        y = sig_y * draws[:, n]
        native = np.empty_like(draws)
        native[:, :n] = draws[:, :n] * np.exp(0.5 * y)[:, None]
        native[:, n] = y
        return native

    def logdet_rule(draws):
        draws = np.atleast_2d(draws)
        return np.log(sig_y) + 0.5 * n * sig_y * draws[:, n]

    inner = TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=lambda rng: rng.normal(size=n + 1),
        kind=f"prs:{model.kind}",
        meta={"native_kind": model.kind},
    )
    return ReparamTarget(inner, pushforward, logdet_rule, "prs", model)


def _generalized_prs(model: TargetModel) -> ReparamTarget:
    # x_i = 10**u_i x_hat_i with the box-bounded u untouched
    n = model.meta["n_local"]
    hw = model.meta["half_width"]
    space = ParameterSpace(_hat_params(model.space, set(range(n))))

    def fused(theta_hat):
        theta_hat = space.validate(theta_hat)
        x_hat, u = theta_hat[:n], theta_hat[n:]
        scale = np.power(10.0, u)
        x = scale * x_hat
        logp, grad = model.value_and_grad(np.concatenate([x, u]))
        g_x, g_u = grad[:n], grad[n:]
        out = np.empty(2 * n)
        out[:n] = g_x * scale
        out[n:] = g_u + LN10 * (g_x * x + 1.0)
        return logp + LN10 * np.sum(u), out

    def pushforward(draws):
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        native = draws.copy()
        native[:, :n] = draws[:, :n] * np.power(10.0, draws[:, n:])
        return native

    def logdet_rule(draws):
        draws = np.atleast_2d(draws)
        return LN10 * np.sum(draws[:, n:], axis=1)

    def prior_sampler(rng):
        u = rng.uniform(-hw, hw, size=n)
        return np.concatenate([rng.normal(size=n), u])

    inner = TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=prior_sampler,
        kind=f"prs:{model.kind}",
        meta={"native_kind": model.kind},
    )
    return ReparamTarget(inner, pushforward, logdet_rule, "prs", model)


def _pta_phi2(model: TargetModel, hyper):
    """Per-coefficient prior variances and d(ln phi2)/d(hyper).

    Returns ``phi2`` with one entry per coefficient (sine and cosine of
    each bin share a value) and the matrix of log-derivatives with one
    row per hyper-parameter.
    """
    dataset = model.meta["dataset"]
    nf = dataset.n_freq
    if model.kind == "pta_powerlaw":
        lfr2 = np.repeat(np.log10(dataset.freqs / dataset.f_ref), 2)
        log10_amp, gamma = hyper
        phi2 = np.power(10.0, log10_amp - gamma * lfr2)
        dln = np.vstack([np.full(2 * nf, LN10), -LN10 * lfr2])
        return phi2, dln
    if model.kind == "pta_freespectral":
        phi2 = np.power(10.0, np.repeat(hyper, 2))
        dln = np.zeros((nf, 2 * nf))
        for k in range(nf):
            dln[k, 2 * k:2 * k + 2] = LN10
        return phi2, dln
    raise UnsupportedModel(f"no prior variance rule for kind "
                           f"{model.kind!r}")


def _pta_prs(model: TargetModel) -> ReparamTarget:
    # a_i = sqrt(phi2_i) a_hat_i: whiten by the prior standard deviation
    dataset = model.meta["dataset"]
    k = 2 * dataset.n_freq
    n_hyper = model.space.dim - k
    space = ParameterSpace(_hat_params(model.space, set(range(k))))

    def fused(theta_hat):
        theta_hat = space.validate(theta_hat)
        a_hat, hyper = theta_hat[:k], theta_hat[k:]
        phi2, dln = _pta_phi2(model, hyper)
        scale = np.sqrt(phi2)
        a = scale * a_hat
        logp, grad = model.value_and_grad(np.concatenate([a, hyper]))
        g_a, g_h = grad[:k], grad[k:]
        out = np.empty(k + n_hyper)
        out[:k] = g_a * scale
        out[k:] = g_h + 0.5 * dln @ (g_a * a + 1.0)
        return logp + 0.5 * np.sum(np.log(phi2)), out

    def pushforward(draws):
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        native = draws.copy()
        for r in range(draws.shape[0]):
            phi2, _ = _pta_phi2(model, draws[r, k:])
            native[r, :k] = draws[r, :k] * np.sqrt(phi2)
        return native

    def logdet_rule(draws):
        draws = np.atleast_2d(draws)
        out = np.empty(draws.shape[0])
        for r in range(draws.shape[0]):
            phi2, _ = _pta_phi2(model, draws[r, k:])
            out[r] = 0.5 * np.sum(np.log(phi2))
        return out

    def prior_sampler(rng):
        hyper = rng.uniform(space.lower[k:], space.upper[k:])
        return np.concatenate([rng.normal(size=k), hyper])

    inner = TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=prior_sampler,
        kind=f"prs:{model.kind}",
        meta={"native_kind": model.kind},
    )
    return ReparamTarget(inner, pushforward, logdet_rule, "prs", model)


def prs_target(model: TargetModel) -> ReparamTarget:
    """Whiten the local block by its conditional prior scale."""
    if model.kind == "classic_funnel":
        return _funnel_prs(model)
    if model.kind == "generalized_funnel":
        return _generalized_prs(model)
    if model.kind in ("pta_powerlaw", "pta_freespectral"):
        return _pta_prs(model)
    raise UnsupportedModel(f"no prior-scale rule for kind {model.kind!r}")


def cprs_conditional_moments(dataset, phi_diag):
    """Exact Gaussian conditional of the coefficients given the data.

    For the linear model d = F a + noise with coefficient prior
    N(0, diag(phi_diag)), the conditional is N(mean, cov) with
    cov = (F'F/sigma^2 + diag(1/phi))^-1 and mean = cov F'd/sigma^2.

    Parameters
    ----------
    dataset : PTADataset
        Provides the cached products (F'F, F'd, d'd) and sigma.
    phi_diag : array, length 2 n_freq
        Prior variance of each coefficient (sine and cosine separately).

    Returns
    -------
    mean : array, length 2 n_freq
    chol_cov : array, lower-triangular Cholesky factor of cov
    """
    phi_diag = np.asarray(phi_diag, dtype=float)
    ftf, ftd, _ = dataset.products
    if phi_diag.shape != ftd.shape:
        raise DimensionMismatch(
            f"phi_diag has length {phi_diag.size}, expected {ftd.size}")
    if np.any(phi_diag <= 0.0) or not np.all(np.isfinite(phi_diag)):
        raise NonPositiveVariance("phi_diag must be positive and finite")
    inv_sig2 = 1.0 / dataset.sigma ** 2
    s = ftf * inv_sig2
    s[np.diag_indices_from(s)] += 1.0 / phi_diag
    try:
        s_chol = cho_factor(s, lower=True)
        cov = cho_solve(s_chol, np.eye(len(phi_diag)))
        chol_cov = cholesky(cov, lower=True)
    except LinAlgError as err:
        raise NumericalSingular(
            "conditional covariance is not positive definite") from err
    mean = cov @ (ftd * inv_sig2)
    return mean, chol_cov


def _half_lower(mat):
    """Lower triangle with the diagonal halved, zeros above."""
    out = np.tril(mat)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _funnel_cprs(model: TargetModel) -> ReparamTarget:
    # the funnel conditional is Gaussian coordinate-wise, with or
    # without a measurement term: 1/v = exp(-y) + 1/sig_l^2
    n = model.meta["n_local"]
    like = model.meta["likelihood"]
    mu_l, inv_var_l = (0.0, 0.0) if like is None \
        else (like[0], 1.0 / like[1] ** 2)
    space = ParameterSpace([Param(f"x{i}_hat") for i in range(1, n + 1)]
                           + [Param("y", block="hyper")])

    def _moments(y):
        v = 1.0 / (np.exp(-y) + inv_var_l)
        return mu_l * inv_var_l * v, v

    def fused(theta_hat):
        theta_hat = space.validate(theta_hat)
        x_hat, y = theta_hat[:n], theta_hat[n]
        m, v = _moments(y)
        root_v = np.sqrt(v)
        x = m + root_v * x_hat
        logp, grad = model.value_and_grad(np.concatenate([x, [y]]))
        g_x, g_y = grad[:n], grad[n]
        dv = v * v * np.exp(-y)
        dx = mu_l * inv_var_l * dv + x_hat * (0.5 * dv / root_v)
        out = np.empty(n + 1)
        out[:n] = g_x * root_v
        out[n] = g_y + np.dot(g_x, dx) + 0.5 * n * dv / v
        return logp + 0.5 * n * np.log(v), out

    def pushforward(draws):
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        m, v = _moments(draws[:, n])
        native = draws.copy()
        native[:, :n] = m[:, None] + np.sqrt(v)[:, None] * draws[:, :n]
        return native

    def logdet_rule(draws):
        draws = np.atleast_2d(draws)
        return 0.5 * n * np.log(_moments(draws[:, n])[1])

    def prior_sampler(rng):
        y = rng.normal(0.0, model.meta["hyper_sigma"])
        return np.concatenate([rng.normal(size=n), [y]])

    inner = TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=prior_sampler,
        kind=f"cprs:{model.kind}",
        meta={"native_kind": model.kind},
    )
    return ReparamTarget(inner, pushforward, logdet_rule, "cprs", model)


def cprs_target(model: TargetModel) -> ReparamTarget:
    """Color the coefficients by their exact posterior conditional.

    Samples (a_hat, hyper) with a = mean(hyper) + L(hyper) a_hat.  By
    construction the a_hat block is standard normal at every hyper
    value, so the sampler sees no funnel at all; the hyper block feels
    exactly its marginal posterior.
    """
    if model.kind == "classic_funnel":
        return _funnel_cprs(model)
    if model.kind not in ("pta_powerlaw", "pta_freespectral"):
        raise UnsupportedModel(
            f"no closed-form conditional for kind {model.kind!r}")
    dataset = model.meta["dataset"]
    k = 2 * dataset.n_freq
    n_hyper = model.space.dim - k
    inv_sig2 = 1.0 / dataset.sigma ** 2
    space = ParameterSpace(_hat_params(model.space, set(range(k))))

    def _moments(hyper):
        phi2, dln = _pta_phi2(model, hyper)
        mean, chol = cprs_conditional_moments(dataset, phi2)
        return phi2, dln, mean, chol

    def fused(theta_hat):
        theta_hat = space.validate(theta_hat)
        a_hat, hyper = theta_hat[:k], theta_hat[k:]
        phi2, dln, mean, chol = _moments(hyper)
        cov = chol @ chol.T
        a = mean + chol @ a_hat
        logp, grad = model.value_and_grad(np.concatenate([a, hyper]))
        g_a, g_h = grad[:k], grad[k:]
        logdet = np.sum(np.log(np.diag(chol)))

        out = np.empty(k + n_hyper)
        out[:k] = chol.T @ g_a
        for j in range(n_hyper):
            # diagonal of d(phi^-1)/d(hyper_j)
            d_j = -dln[j] / phi2
            da = -cov @ (d_j * mean)
            da -= chol @ (_half_lower((chol.T * d_j) @ chol) @ a_hat)
            out[k + j] = g_h[j] + g_a @ da - 0.5 * np.sum(
                d_j * np.diag(cov))
        return logp + logdet, out

    def pushforward(draws):
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        native = draws.copy()
        for r in range(draws.shape[0]):
            _, _, mean, chol = _moments(draws[r, k:])
            native[r, :k] = mean + chol @ draws[r, :k]
        return native

    def logdet_rule(draws):
        draws = np.atleast_2d(draws)
        out = np.empty(draws.shape[0])
        for r in range(draws.shape[0]):
            _, _, _, chol = _moments(draws[r, k:])
            out[r] = np.sum(np.log(np.diag(chol)))
        return out

    def prior_sampler(rng):
        hyper = rng.uniform(space.lower[k:], space.upper[k:])
        return np.concatenate([rng.normal(size=k), hyper])

    inner = TargetModel(
        space=space,
        log_density=lambda t: fused(t)[0],
        grad_log_density=lambda t: fused(t)[1],
        logp_and_grad=fused,
        prior_sampler=prior_sampler,
        kind=f"cprs:{model.kind}",
        meta={"native_kind": model.kind},
    )
    return ReparamTarget(inner, pushforward, logdet_rule, "cprs", model)


def reparameterize(model: TargetModel, scheme: str) -> ReparamTarget:
    """Dispatch on scheme name: ``ns``, ``prs``, or ``cprs``."""
    if scheme == "ns":
        return ns_target(model)
    if scheme == "prs":
        return prs_target(model)
    if scheme == "cprs":
        return cprs_target(model)
    raise ValueError(f"unknown reparameterization scheme {scheme!r}")
