"""Parameter spaces, coordinate transforms and the target-model contract.

A TargetModel bundles a log density, its analytic gradient and the
ParameterSpace the two are defined on.  Samplers work in unconstrained
coordinates, so box-bounded coordinates are mapped through a shifted
logit ("logit-affine") and the Jacobian is folded into the wrapped
density by unconstrained_target().
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BoundViolation, DimensionMismatch, NonFiniteDensity


def sigmoid(u):
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def softplus(u):
    u = np.asarray(u, dtype=float)
    return np.log1p(np.exp(-np.abs(u))) + np.maximum(u, 0.0)


@dataclass(frozen=True)
class Param:
    """One named coordinate with optional box bounds.

    block labels which stage of the hierarchy the coordinate belongs
    to: "local" for per-datum parameters that get marginalised away,
    "hyper" for the parameters the final density lives on.
    """

    name: str
    lower: float = -np.inf
    upper: float = np.inf
    block: str = "local"

    def __post_init__(self):
        if self.block not in ("local", "hyper"):
            raise ValueError(f"unknown block label {self.block!r}")
        if not self.lower < self.upper:
            raise ValueError(f"empty support for {self.name}: "
                             f"[{self.lower}, {self.upper}]")
        if np.isfinite(self.lower) != np.isfinite(self.upper):
            raise ValueError(f"one-sided bounds not supported ({self.name})")

    @property
    def bounded(self):
        return np.isfinite(self.lower)


class ParameterSpace:
    """An ordered collection of Params with vectorised bound checks."""

    def __init__(self, params):
        params = tuple(params)
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = params
        self.names = names
        self.lower = np.array([p.lower for p in params])
        self.upper = np.array([p.upper for p in params])
        self.bounded = np.isfinite(self.lower)
        self.blocks = [p.block for p in params]

    @property
    def dim(self):
        return len(self.params)

    def block_indices(self, block):
        return np.array([i for i, b in enumerate(self.blocks) if b == block],
                        dtype=int)

    def validate(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DimensionMismatch(
                f"expected shape ({self.dim},), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise BoundViolation("non-finite parameter value")
        if np.any(theta < self.lower) or np.any(theta > self.upper):
            bad = np.where((theta < self.lower) | (theta > self.upper))[0][0]
            raise BoundViolation(
                f"{self.names[bad]} = {theta[bad]} outside "
                f"[{self.lower[bad]}, {self.upper[bad]}]")
        return theta

    def contains(self, theta):
        theta = np.asarray(theta, dtype=float)
        return bool(theta.shape == (self.dim,)
                    and np.all(theta >= self.lower)
                    and np.all(theta <= self.upper))

    def unbounded_copy(self):
        return ParameterSpace(
            Param(p.name, block=p.block) for p in self.params)


@dataclass(frozen=True)
class ConstraintMap:
    """Injective map from a low-dimensional hyper space into the
    higher-dimensional hyper space of a generalized model.

    func maps an (in_dim,) point to an (out_dim,) image; jacobian
    returns the (out_dim, in_dim) derivative matrix at that point.
    """

    name: str
    in_dim: int
    out_dim: int
    func: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]

    def __call__(self, y):
        return self.func(np.asarray(y, dtype=float))


# ---------------------------------------------------------------------------
# scalar coordinate transforms


class Transform:
    """Monotone elementwise map x -> u with tractable Jacobian."""

    kind = "identity"

    def forward(self, x):
        return np.asarray(x, dtype=float)

    def inverse(self, u):
        return np.asarray(u, dtype=float)

    def log_abs_det_forward(self, x):
        """Sum over coordinates of log |du/dx| at x."""
        return 0.0


class AffineTransform(Transform):
    kind = "affine"

    def __init__(self, scale, shift):
        if scale == 0:
            raise ValueError("affine transform needs nonzero scale")
        self.scale = float(scale)
        self.shift = float(shift)

    def forward(self, x):
        return self.scale * np.asarray(x, dtype=float) + self.shift

    def inverse(self, u):
        return (np.asarray(u, dtype=float) - self.shift) / self.scale

    def log_abs_det_forward(self, x):
        return np.size(x) * np.log(abs(self.scale))


class Log10Transform(Transform):
    kind = "log10"

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise BoundViolation("log10 transform needs positive input")
        return np.log10(x)

    def inverse(self, u):
        return np.power(10.0, np.asarray(u, dtype=float))

    def log_abs_det_forward(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise BoundViolation("log10 transform needs positive input")
        # du/dx = 1 / (x ln 10)
        return float(-np.sum(np.log(x)) - np.size(x) * np.log(np.log(10.0)))


class LogitAffineTransform(Transform):
    """Maps the open box (lower, upper) onto the real line."""

    kind = "logit-affine"

    def __init__(self, lower, upper):
        if not lower < upper:
            raise ValueError("need lower < upper")
        self.lower = float(lower)
        self.upper = float(upper)
        self.width = float(upper - lower)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        t = (x - self.lower) / self.width
        if np.any(t <= 0) or np.any(t >= 1):
            raise BoundViolation("logit-affine input outside open interval")
        return np.log(t) - np.log1p(-t)

    def inverse(self, u):
        return self.lower + self.width * sigmoid(u)

    def log_abs_det_forward(self, x):
        x = np.asarray(x, dtype=float)
        t = (x - self.lower) / self.width
        if np.any(t <= 0) or np.any(t >= 1):
            raise BoundViolation("logit-affine input outside open interval")
        return float(-np.sum(np.log(t) + np.log1p(-t)) -
                     np.size(x) * np.log(self.width))


# ---------------------------------------------------------------------------
# target models


@dataclass
class TargetModel:
    """A log density with analytic gradient over a ParameterSpace.

    kind tags the model family (reparameterisation rules dispatch on
    it) and meta carries whatever the family needs to expose (dataset
    products, structural constants).  prior_sampler, when present,
    draws one point from the model's own prior for chain starts.
    """

    space: ParameterSpace
    log_density: Callable[[np.ndarray], float]
    grad_log_density: Callable[[np.ndarray], np.ndarray]
    logp_and_grad: Optional[Callable] = None
    prior_sampler: Optional[Callable] = None
    kind: str = ""
    meta: dict = field(default_factory=dict)

    def value_and_grad(self, theta):
        if self.logp_and_grad is not None:
            return self.logp_and_grad(theta)
        return self.log_density(theta), self.grad_log_density(theta)


class SpaceTransform:
    """Per-coordinate map between a ParameterSpace and the real line.

    Bounded coordinates go through logit-affine, unbounded ones are
    left alone.  All methods are vectorised over the coordinate axis.
    """

    def __init__(self, space: ParameterSpace):
        self.space = space
        self.idx = np.where(space.bounded)[0]
        self.lo = space.lower[self.idx]
        self.width = space.upper[self.idx] - self.lo
        self.any_bounded = self.idx.size > 0

    def forward(self, theta):
        theta = self.space.validate(theta)
        u = np.array(theta, dtype=float)
        if self.any_bounded:
            t = (theta[self.idx] - self.lo) / self.width
            if np.any(t <= 0) or np.any(t >= 1):
                raise BoundViolation(
                    "bounded coordinate on or outside its interval")
            u[self.idx] = np.log(t) - np.log1p(-t)
        return u

    def inverse(self, u):
        theta = np.array(u, dtype=float)
        if self.any_bounded:
            theta[self.idx] = self.lo + self.width * sigmoid(u[self.idx])
        return theta

    def log_abs_det_inverse(self, u):
        """log |det d theta / d u|, the term added to the density."""
        if not self.any_bounded:
            return 0.0
        ub = u[self.idx]
        return float(np.sum(np.log(self.width)
                            - softplus(ub) - softplus(-ub)))

    def dtheta_du(self, u):
        """Diagonal of the inverse-map Jacobian."""
        d = np.ones_like(np.asarray(u, dtype=float))
        if self.any_bounded:
            s = sigmoid(u[self.idx])
            d[self.idx] = self.width * s * (1.0 - s)
        return d

    def grad_log_abs_det_inverse(self, u):
        g = np.zeros_like(np.asarray(u, dtype=float))
        if self.any_bounded:
            g[self.idx] = 1.0 - 2.0 * sigmoid(u[self.idx])
        return g


def to_unconstrained(space: ParameterSpace) -> SpaceTransform:
    """Build the coordinate pack mapping space onto R^dim."""
    return SpaceTransform(space)


def unconstrained_target(model: TargetModel) -> TargetModel:
    """Wrap model so its density lives on all of R^dim.

    The returned model's density is the original plus the log Jacobian
    of the inverse map, so pushing its draws through st.inverse yields
    draws from the original density.  Models with no bounded
    coordinates are returned unchanged.
    """
    st = SpaceTransform(model.space)
    if not st.any_bounded:
        return model

    def logp(u):
        theta = st.inverse(u)
        return model.log_density(theta) + st.log_abs_det_inverse(u)

    def fused(u):
        theta = st.inverse(u)
        val, grad = model.value_and_grad(theta)
        val += st.log_abs_det_inverse(u)
        grad = grad * st.dtheta_du(u) + st.grad_log_abs_det_inverse(u)
        return val, grad

    def grad(u):
        return fused(u)[1]

    prior = None
    if model.prior_sampler is not None:
        def prior(rng):
            return st.forward(model.prior_sampler(rng))

    wrapped = TargetModel(
        space=model.space.unbounded_copy(),
        log_density=logp,
        grad_log_density=grad,
        logp_and_grad=fused,
        prior_sampler=prior,
        kind=model.kind,
        meta=dict(model.meta),
    )
    wrapped.meta["space_transform"] = st
    wrapped.meta["native_model"] = model
    return wrapped


def check_gradient(model: TargetModel, theta, h=1e-5, floor=1e-8):
    """Max relative error between analytic and central-difference
    gradients at theta.  Relative error per coordinate uses an
    absolute floor in the denominator so exact zeros compare cleanly;
    raise the floor when the density is large enough that differencing
    noise swamps the default.
    """
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(model.grad_log_density(theta), dtype=float)
    if g.shape != theta.shape:
        raise DimensionMismatch("gradient shape does not match theta")
    fd = np.empty_like(g)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        hi = model.log_density(theta + step)
        lo = model.log_density(theta - step)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteDensity(
                f"non-finite density in stencil of coordinate {i}")
        fd[i] = (hi - lo) / (2.0 * h)
    if not np.all(np.isfinite(g)):
        raise NonFiniteDensity("non-finite analytic gradient")
    denom = np.maximum(np.abs(g), floor)
    return float(np.max(np.abs(fd - g) / denom))
