"""The compiled kernels and their pure-numpy twins must agree.

Each jitted function keeps its original python under .py_func (the
fallback decorator attaches the same attribute), so both paths can be
compared in-process regardless of whether numba is active.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mssample import kernels


def _pairs(rng, n=9):
    x = rng.normal(size=n) * 2.0
    u = rng.uniform(-3.5, 3.5, size=n)
    return x, u


def _compare(jitted, args):
    got = jitted(*args)
    want = jitted.py_func(*args)
    for g, w in zip(got, want):
        assert_allclose(g, w, rtol=1e-12, atol=1e-12)


def test_twin_classic(rng):
    x, _ = _pairs(rng)
    _compare(kernels.classic_funnel_lpg, (x, 0.7, 3.0))


def test_twin_gaussian_likelihood(rng):
    x, _ = _pairs(rng)
    _compare(kernels.gaussian_likelihood_lpg, (x, 2.0, 5.0))


def test_twin_generalized(rng):
    x, u = _pairs(rng)
    _compare(kernels.generalized_funnel_lpg, (x, u, 4.0))


@pytest.fixture()
def quad_inputs(rng):
    k = 6
    f = rng.normal(size=(40, k))
    d = rng.normal(size=40)
    a = rng.normal(size=k)
    return a, f.T @ f, f.T @ d, float(d @ d)


def test_twin_pta_quad(quad_inputs):
    a, ftf, ftd, dtd = quad_inputs
    _compare(kernels.pta_quad_lpg, (a, ftf, ftd, dtd, 1.3))


def test_twin_coeff_prior(rng):
    a = rng.normal(size=8)
    phi = rng.uniform(0.2, 2.0, size=4)
    _compare(kernels.coeff_prior_lpg, (a, phi))


def test_twin_powerlaw(quad_inputs, rng):
    a, ftf, ftd, dtd = quad_inputs
    lfr = np.log10(np.arange(1, 4))
    _compare(kernels.pta_powerlaw_lpg, (a, 0.4, 2.5, lfr, ftf, ftd,
                                        dtd, 1.0))


def test_twin_freespectral(quad_inputs, rng):
    a, ftf, ftd, dtd = quad_inputs
    u = rng.uniform(-2, 1, size=3)
    _compare(kernels.pta_freespectral_lpg, (a, u, ftf, ftd, dtd, 1.0))


def test_flag_is_exposed():
    assert isinstance(kernels.NUMBA_ENABLED, bool)
