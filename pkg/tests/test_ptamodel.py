"""Model-level checks for the red-noise targets.

The heavy oracle here is the dense N x N marginal: the package
evaluates log N(d; 0, sigma^2 I + F Phi F^T) through the small inner
form, and the test rebuilds the full covariance directly and compares.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import multivariate_normal, norm

from mssample.core import check_gradient
from mssample.errors import (BoundViolation, DegenerateFrequencies,
                             DimensionMismatch, NonPositiveVariance)
from mssample.ptamodel import (pta_analytic_marginal_logp, pta_coeff_prior_logp,
                               pta_constraint, pta_freespectral_marginal_logp,
                               pta_freespectral_model, pta_hyper_prior,
                               pta_loglike, pta_loglike_grad,
                               pta_powerlaw_model)
from mssample.ptasim import SimConfig, power_law_variances, simulate_dataset


def test_loglike_direct_oracle(small_dataset, rng):
    # recompute from the full residual vector, no cached products
    f = small_dataset.design
    for _ in range(5):
        a = rng.normal(size=2 * small_dataset.n_freq)
        r = small_dataset.data - f @ a
        want = -0.5 * (r @ r) / small_dataset.sigma ** 2
        assert_allclose(pta_loglike(small_dataset, a), want, rtol=1e-10)
        want_grad = f.T @ r / small_dataset.sigma ** 2
        assert_allclose(pta_loglike_grad(small_dataset, a), want_grad,
                        rtol=1e-8)


def test_loglike_rejects_wrong_length(small_dataset):
    with pytest.raises(DimensionMismatch):
        pta_loglike(small_dataset, np.zeros(3))


def test_coeff_prior_reference_values():
    # at a = 0 with phi = 1/(2 pi) every per-coefficient term is zero
    phi = np.full(4, 1.0 / (2 * np.pi))
    assert_allclose(pta_coeff_prior_logp(np.zeros(8), phi), 0.0,
                    atol=1e-13)
    # doubling every variance at a = 0 costs ln 2 per bin
    base = pta_coeff_prior_logp(np.zeros(8), np.full(4, 0.3))
    double = pta_coeff_prior_logp(np.zeros(8), np.full(4, 0.6))
    assert_allclose(double - base, -4 * np.log(2.0), rtol=1e-12)


def test_coeff_prior_scipy_oracle(rng):
    for _ in range(10):
        phi = rng.uniform(0.1, 2.0, size=5)
        a = rng.normal(size=10)
        want = norm.logpdf(a, 0, np.sqrt(np.repeat(phi, 2))).sum()
        assert_allclose(pta_coeff_prior_logp(a, phi), want, rtol=1e-12)


def test_coeff_prior_validation():
    with pytest.raises(NonPositiveVariance):
        pta_coeff_prior_logp(np.zeros(4), np.array([1.0, 0.0]))
    with pytest.raises(DimensionMismatch):
        pta_coeff_prior_logp(np.zeros(4), np.ones(3))


def test_powerlaw_model_composition(small_dataset, rng):
    # the joint density must be likelihood + prior + flat box constants
    model = pta_powerlaw_model(small_dataset)
    for _ in range(5):
        log10_amp = rng.uniform(-1.5, 1.5)
        gamma = rng.uniform(0.5, 6.5)
        a = rng.normal(size=8)
        phi = power_law_variances(10 ** log10_amp, gamma,
                                  small_dataset.freqs, small_dataset.f_ref)
        want = (pta_loglike(small_dataset, a)
                + pta_coeff_prior_logp(a, phi)
                - np.log(4.0) - np.log(7.0))
        theta = np.concatenate([a, [log10_amp, gamma]])
        assert_allclose(model.log_density(theta), want, rtol=1e-10)


def test_powerlaw_model_gradient(small_dataset, rng):
    model = pta_powerlaw_model(small_dataset)
    for _ in range(8):
        theta = np.concatenate([rng.normal(size=8),
                                [rng.uniform(-1.5, 1.5),
                                 rng.uniform(0.5, 6.5)]])
        assert check_gradient(model, theta) < 1e-5


def test_powerlaw_model_bounds(small_dataset):
    model = pta_powerlaw_model(small_dataset)
    bad = np.concatenate([np.zeros(8), [3.0, 1.0]])
    with pytest.raises(BoundViolation):
        model.log_density(bad)


def test_freespectral_model_gradient(small_dataset, rng):
    model = pta_freespectral_model(small_dataset)
    for _ in range(8):
        u = rng.uniform(-3.0, 2.0, size=4)
        a = rng.normal(size=8) * np.power(10.0, np.repeat(u, 2) / 2)
        assert check_gradient(model, np.concatenate([a, u]), h=1e-6) < 1e-4


def test_freespectral_matches_powerlaw_on_constraint(small_dataset, rng):
    # plugging the constraint image into the free-spectral density
    # reproduces the power-law density up to the two flat priors
    pl = pta_powerlaw_model(small_dataset)
    fs = pta_freespectral_model(small_dataset)
    con = pta_constraint(small_dataset)
    for _ in range(5):
        eta = np.array([rng.uniform(-1, 1), rng.uniform(0.5, 5.0)])
        a = rng.normal(size=8) * 0.5
        u = con(eta)
        if np.any(u <= -8) or np.any(u >= 4):
            continue
        d = (fs.log_density(np.concatenate([a, u]))
             - pl.log_density(np.concatenate([a, eta])))
        want = (-4 * np.log(12.0)) - (-np.log(4.0) - np.log(7.0))
        assert_allclose(d, want, rtol=1e-9)


def test_constraint_values_and_jacobian(small_dataset):
    con = pta_constraint(small_dataset)
    assert con.in_dim == 2 and con.out_dim == 4
    lfr = np.log10(small_dataset.freqs / small_dataset.f_ref)
    eta = np.array([0.7, 2.5])
    assert_allclose(con(eta), 0.7 - 2.5 * lfr, rtol=1e-12)
    # first bin sits at the reference frequency
    assert_allclose(con(eta)[0], 0.7, rtol=1e-12)
    jac = con.jacobian(eta)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (con(eta + e) - con(eta - e)) / (2 * h)
        assert_allclose(jac[:, j], fd, rtol=1e-7, atol=1e-10)


def test_constraint_needs_two_frequencies():
    cfg = SimConfig(n_samples=40, n_freq=1)
    ds = simulate_dataset(cfg, seed=3)
    with pytest.raises(DegenerateFrequencies):
        pta_constraint(ds)


def test_hyper_prior_model():
    model = pta_hyper_prior()
    v = model.log_density(np.array([0.0, 3.0]))
    assert_allclose(v, -np.log(28.0), rtol=1e-12)
    with pytest.raises(BoundViolation):
        model.log_density(np.array([0.0, 8.0]))


def test_analytic_marginal_dense_oracle(small_dataset):
    # rebuild the full covariance and use scipy's dense density
    f = small_dataset.design
    n = small_dataset.times.size
    for log10_amp, gamma in [(-0.5, 1.0), (0.3, 3.0), (1.0, 5.5)]:
        phi = power_law_variances(10 ** log10_amp, gamma,
                                  small_dataset.freqs, small_dataset.f_ref)
        cov = small_dataset.sigma ** 2 * np.eye(n) \
            + f @ np.diag(np.repeat(phi, 2)) @ f.T
        want = multivariate_normal.logpdf(small_dataset.data,
                                          mean=np.zeros(n), cov=cov)
        got = pta_analytic_marginal_logp(small_dataset, log10_amp, gamma)
        assert_allclose(got, want, rtol=1e-9)


def test_freespectral_marginal_consistency(small_dataset):
    con = pta_constraint(small_dataset)
    eta = np.array([0.2, 2.0])
    a = pta_analytic_marginal_logp(small_dataset, *eta)
    b = pta_freespectral_marginal_logp(small_dataset, con(eta))
    assert_allclose(a, b, rtol=1e-12)


def test_f_ref_override():
    ds = simulate_dataset(SimConfig(n_samples=60, span=6.0, n_freq=6), seed=11)
    top = ds.freqs[-1]
    con = pta_constraint(ds, f_ref=top)
    eta = np.array([-0.4, 3.1])
    # amplitude now anchored at the top bin
    assert_allclose(con(eta)[-1], -0.4, rtol=1e-12)
    assert_allclose(con(eta), -0.4 - 3.1 * np.log10(ds.freqs / top),
                    rtol=1e-12)
    phi = power_law_variances(10 ** -0.4, 3.1, ds.freqs, top)
    want = pta_freespectral_marginal_logp(ds, np.log10(phi))
    got = pta_analytic_marginal_logp(ds, -0.4, 3.1, f_ref=top)
    assert_allclose(got, want, rtol=1e-12)


def test_powerlaw_conditional_coefficient_funnel():
    # long reference chain on a signal-free dataset, amplitude anchored
    # at the top of the band: the top-bin coefficient spread must open
    # up with the amplitude (small A decile -> narrow, large -> wide)
    from mssample.hmc import HMCConfig, sample_chains
    from mssample.reparam import reparameterize

    ds = simulate_dataset(SimConfig(n_samples=80, span=6.0, n_freq=6,
                                    true_log10_amp=-8.0), seed=5)
    model = pta_powerlaw_model(ds, amp_bounds=(-5.0, 2.0), f_ref=ds.freqs[-1])
    target = reparameterize(model, "cprs")
    chains = sample_chains(target.inner,
                           HMCConfig(n_warmup=400, n_samples=1200, seed=31),
                           n_chains=2)
    draws = np.vstack([target.pushforward(c.draws) for c in chains])
    amps = draws[:, model.space.names.index("log10_A")]
    lo, hi = np.quantile(amps, [0.1, 0.9])
    for name in ("sin6", "cos6"):
        j = model.space.names.index(name)
        narrow = draws[amps <= lo, j].std()
        wide = draws[amps >= hi, j].std()
        assert narrow < wide
