"""Density estimation from samples: a coupling flow and a KDE fallback.

The flow is a stack of affine coupling layers with alternating
half-masks.  Each layer leaves one half of the coordinates untouched,
feeds that half through a small two-hidden-layer perceptron, and uses
the output to scale and shift the other half.  Both directions are
closed-form, so the model gives exact log-densities with exact input
gradients, which is what the second sampling stage needs.

Training is maximum likelihood by minibatch gradient ascent with
momentum; the backward pass is written out by hand below rather than
pulled from an autodiff framework.  Scale outputs are squashed through
``S_MAX * tanh`` so a layer can never become non-invertible.

One-dimensional inputs are padded with an independent standard-normal
auxiliary coordinate (coupling needs at least two), and the auxiliary
is integrated back out with Gauss-Hermite quadrature at evaluation
time.
"""

import dataclasses
import json

import numpy as np
from scipy.special import logsumexp

from .errors import (DimensionMismatch, FormatError, NonFiniteLoss,
                     NonPositiveVariance, TooFewSamples, VersionMismatch)

FLOW_VERSION = 1
S_MAX = 3.0
LN2PI = float(np.log(2.0 * np.pi))
GH_NODES = 33


@dataclasses.dataclass
class TrainConfig:
    """Knobs for flow training; defaults suit 1e4-1e5 sample sets."""

    n_layers: int = 8
    hidden_width: int = 64
    batch: int = 256
    max_epochs: int = 500
    learn_rate: float = 3e-3
    momentum: float = 0.9
    clip_norm: float = 10.0
    val_frac: float = 0.1
    patience: int = 20
    schedule: str = "plateau"
    ema: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_frac < 0.5:
            raise ValueError("val_frac must lie in (0, 0.5)")
        for field in ("n_layers", "hidden_width", "batch", "max_epochs",
                      "patience"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.learn_rate <= 0.0 or self.clip_norm <= 0.0:
            raise ValueError("learn_rate and clip_norm must be positive")
        if self.schedule not in ("plateau", "cosine"):
            raise ValueError("schedule must be 'plateau' or 'cosine'")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema must lie in [0, 1)")


class Standardizer:
    """Per-coordinate affine map fitted to the training data."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        if np.any(self.std <= 0.0) or not np.all(np.isfinite(self.std)):
            raise NonPositiveVariance(
                "training data has a degenerate coordinate")
        # log-Jacobian of x -> (x - mean)/std
        self.logdet = float(-np.sum(np.log(self.std)))

    @classmethod
    def from_samples(cls, samples):
        return cls(samples.mean(axis=0), samples.std(axis=0))

    def to_std(self, x):
        return (x - self.mean) / self.std

    def to_data(self, u):
        return self.mean + self.std * u


class CouplingLayer:
    """One affine coupling step.

    Coordinates where ``mask`` is True pass through unchanged and feed
    the conditioner; the rest are scaled and shifted.  ``forward`` maps
    base to data, ``inverse`` maps data to base.
    """

    def __init__(self, mask, weights, biases):
        self.mask = np.asarray(mask, dtype=bool)
        self.w1, self.w2, self.w3 = [np.asarray(w, dtype=float)
                                     for w in weights]
        self.b1, self.b2, self.b3 = [np.asarray(b, dtype=float)
                                     for b in biases]
        self.n_cond = int(self.mask.sum())
        self.n_out = self.mask.size - self.n_cond

    @classmethod
    def create(cls, mask, width, rng):
        mask = np.asarray(mask, dtype=bool)
        n_a = int(mask.sum())
        n_b = mask.size - n_a
        w1 = rng.normal(scale=1.0 / np.sqrt(n_a), size=(width, n_a))
        w2 = rng.normal(scale=1.0 / np.sqrt(width), size=(width, width))
        # zero last layer: the flow starts as the identity map
        w3 = np.zeros((2 * n_b, width))
        return cls(mask, [w1, w2, w3],
                   [np.zeros(width), np.zeros(width), np.zeros(2 * n_b)])

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def set_params(self, values):
        (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3) = \
            [np.array(v, dtype=float) for v in values]

    def _conditioner(self, a):
        h1 = np.tanh(a @ self.w1.T + self.b1)
        h2 = np.tanh(h1 @ self.w2.T + self.b2)
        out = h2 @ self.w3.T + self.b3
        s = S_MAX * np.tanh(out[:, :self.n_out])
        t = out[:, self.n_out:]
        return h1, h2, s, t

    def forward(self, v):
        """Base-to-data direction; returns (v_out, logdet per row)."""
        out = v.copy()
        _, _, s, t = self._conditioner(v[:, self.mask])
        out[:, ~self.mask] = v[:, ~self.mask] * np.exp(s) + t
        return out, np.sum(s, axis=1)

    def inverse(self, v):
        """Data-to-base direction; returns (v_out, logdet, cache)."""
        a = v[:, self.mask]
        h1, h2, s, t = self._conditioner(a)
        b_out = (v[:, ~self.mask] - t) * np.exp(-s)
        out = v.copy()
        out[:, ~self.mask] = b_out
        cache = (a, h1, h2, s, b_out)
        return out, -np.sum(s, axis=1), cache

    def backward(self, cache, g_out, weight, grads=None):
        """Reverse-mode step through ``inverse``.

        ``g_out`` is the objective gradient at this layer's output (a
        full-width batch matrix); ``weight`` is the per-row weight of
        the direct ``-sum(s)`` log-det term.  When ``grads`` is given,
        parameter gradients are accumulated into it; input gradients
        are returned either way.
        """
        a, h1, h2, s, b_out = cache
        g_b_out = g_out[:, ~self.mask]
        g_b_in = g_b_out * np.exp(-s)
        g_t = -g_b_in
        # d(b_out)/ds = -b_out, plus the log-det term itself
        g_s = -g_b_out * b_out - weight[:, None]
        g_raw = g_s * (S_MAX - s * s / S_MAX)
        g_o = np.concatenate([g_raw, g_t], axis=1)
        g_h2 = g_o @ self.w3
        g_p2 = g_h2 * (1.0 - h2 * h2)
        g_h1 = g_p2 @ self.w2
        g_p1 = g_h1 * (1.0 - h1 * h1)
        g_a = g_p1 @ self.w1
        if grads is not None:
            grads["w3"] += g_o.T @ h2
            grads["b3"] += g_o.sum(axis=0)
            grads["w2"] += g_p2.T @ h1
            grads["b2"] += g_p2.sum(axis=0)
            grads["w1"] += g_p1.T @ a
            grads["b1"] += g_p1.sum(axis=0)
        g_in = np.empty_like(g_out)
        g_in[:, self.mask] = g_out[:, self.mask] + g_a
        g_in[:, ~self.mask] = g_b_in
        return g_in


def _roll_masks(dim, n_layers):
    base = np.zeros(dim, dtype=bool)
    base[:(dim + 1) // 2] = True
    return [np.roll(base, k) for k in range(n_layers)]


def _gh_nodes():
    nodes, weights = np.polynomial.hermite.hermgauss(GH_NODES)
    # rewrite int f(w) dw as a Gauss-Hermite sum with w = sqrt(2) t
    points = np.sqrt(2.0) * nodes
    log_w = np.log(weights) + nodes ** 2 + 0.5 * np.log(2.0)
    return points, log_w


class FlowModel:
    """Trained coupling flow over ``dim`` coordinates.

    ``aug`` marks the one-dimensional case, where the internal flow is
    two-dimensional and the second coordinate is an auxiliary to be
    quadrature-marginalized away.
    """

    def __init__(self, dim, layers, standardizer, aug=False, history=None):
        self.dim = dim
        self.layers = layers
        self.standardizer = standardizer
        self.aug = aug
        self.history = history or []

    @property
    def inner_dim(self):
        return self.dim + 1 if self.aug else self.dim

    def _check(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise DimensionMismatch(
                f"expected points of dimension {self.dim}, "
                f"got {x.shape[1]}")
        return x

    def _inverse_chain(self, x_inner):
        """Data to base with total log-det (standardizer included)."""
        v = self.standardizer.to_std(x_inner)
        logdet = np.full(v.shape[0], self.standardizer.logdet)
        caches = []
        for layer in reversed(self.layers):
            v, ld, cache = layer.inverse(v)
            logdet += ld
            caches.append((layer, cache))
        return v, logdet, caches

    def _forward_chain(self, u):
        v = u.copy()
        logdet = np.zeros(v.shape[0])
        for layer in self.layers:
            v, ld = layer.forward(v)
            logdet += ld
        return self.standardizer.to_data(v), logdet

    def _logp_inner(self, x_inner):
        z, logdet, _ = self._inverse_chain(x_inner)
        return -0.5 * np.sum(z * z, axis=1) \
            - 0.5 * z.shape[1] * LN2PI + logdet

    def _logp_grad_inner(self, x_inner):
        z, logdet, caches = self._inverse_chain(x_inner)
        logp = -0.5 * np.sum(z * z, axis=1) \
            - 0.5 * z.shape[1] * LN2PI + logdet
        g = -z
        weight = np.ones(z.shape[0])
        for layer, cache in reversed(caches):
            g = layer.backward(cache, g, weight)
        return logp, g / self.standardizer.std

    def log_density_batch(self, x):
        x = self._check(x)
        if not self.aug:
            return self._logp_inner(x)
        points, log_w = _gh_nodes()
        parts = np.empty((len(points), x.shape[0]))
        for i, (w, lw) in enumerate(zip(points, log_w)):
            inner = np.column_stack([x[:, 0], np.full(x.shape[0], w)])
            parts[i] = self._logp_inner(inner) + lw
        return logsumexp(parts, axis=0)

    def log_density(self, x):
        return float(self.log_density_batch(x)[0])

    def log_density_and_grad(self, x):
        x = self._check(x)
        if not self.aug:
            logp, g = self._logp_grad_inner(x)
            return float(logp[0]), g[0]
        points, log_w = _gh_nodes()
        vals = np.empty(len(points))
        grads = np.empty(len(points))
        for i, (w, lw) in enumerate(zip(points, log_w)):
            inner = np.column_stack([x[:, 0], [w]])
            lp, g = self._logp_grad_inner(inner)
            vals[i] = lp[0] + lw
            grads[i] = g[0, 0]
        total = logsumexp(vals)
        soft = np.exp(vals - total)
        return float(total), np.array([np.dot(soft, grads)])

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        u = rng.normal(size=(n, self.inner_dim))
        x, _ = self._forward_chain(u)
        return x[:, :1] if self.aug else x


def flow_log_density(flow: FlowModel, x):
    """Log-density and its gradient at a single point."""
    return flow.log_density_and_grad(x)


def flow_sample(flow: FlowModel, n, seed):
    if n < 1:
        raise ValueError("n must be at least 1")
    return flow.sample(n, seed)


def _clip_gradients(grad_list, clip_norm):
    total = np.sqrt(sum(float(np.sum(g * g))
                        for grads in grad_list for g in grads.values()))
    if total > clip_norm:
        factor = clip_norm / total
        for grads in grad_list:
            for key in grads:
                grads[key] *= factor


def train_flow(samples, cfg: TrainConfig = None) -> FlowModel:
    """Fit a coupling flow to samples by maximum likelihood.

    Deterministic for a fixed config seed.  Returns the model with the
    best validation log-density seen; ``flow.history`` records
    (epoch, train_logp, val_logp, best_val) per epoch.
    """
    cfg = cfg or TrainConfig()
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.ndim != 2:
        raise DimensionMismatch("samples must be a matrix")
    n, data_dim = samples.shape
    if n < max(2 * data_dim, 8):
        raise TooFewSamples(
            f"{n} samples cannot constrain a {data_dim}-d density")
    if not np.all(np.isfinite(samples)):
        raise NonFiniteLoss("training samples contain non-finite values")

    aug = data_dim == 1
    rng = np.random.default_rng(cfg.seed)
    if aug:
        samples = np.column_stack([samples[:, 0], rng.normal(size=n)])
    dim = samples.shape[1]

    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_frac * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    standardizer = Standardizer.from_samples(samples[train_idx])
    train = standardizer.to_std(samples[train_idx])
    val = samples[val_idx]

    layers = [CouplingLayer.create(mask, cfg.hidden_width, rng)
              for mask in _roll_masks(dim, cfg.n_layers)]
    flow = FlowModel(data_dim, layers, standardizer, aug=aug)

    moment1 = [{k: np.zeros_like(v) for k, v in zip(
        ("w1", "b1", "w2", "b2", "w3", "b3"), layer.params())}
        for layer in layers]
    moment2 = [{k: np.zeros_like(v) for k, v in zip(
        ("w1", "b1", "w2", "b2", "w3", "b3"), layer.params())}
        for layer in layers]
    step_count = 0
    best_val = -np.inf
    best_params = [[p.copy() for p in layer.params()] for layer in layers]
    stale = 0
    decay = 1.0
    # Polyak averaging: checkpoints come from a running average of the
    # iterates rather than the raw ones, which damps minibatch noise
    shadow = None
    if cfg.ema > 0.0:
        shadow = [[p.copy() for p in layer.params()] for layer in layers]

    for epoch in range(cfg.max_epochs):
        if cfg.schedule == "cosine":
            lr = cfg.learn_rate * 0.5 \
                * (1.0 + np.cos(np.pi * epoch / cfg.max_epochs))
        else:
            # step decay on validation plateau: halve whenever progress
            # stalls for five epochs, give up after `patience` of them
            lr = cfg.learn_rate * decay
        order = rng.permutation(len(train))
        epoch_logp = 0.0
        for start in range(0, len(train), cfg.batch):
            batch = train[order[start:start + cfg.batch]]
            m = batch.shape[0]

            v = batch
            logdet = np.zeros(m)
            caches = []
            for layer in reversed(layers):
                v, ld, cache = layer.inverse(v)
                logdet += ld
                caches.append((layer, cache))
            logp = -0.5 * np.sum(v * v, axis=1) - 0.5 * dim * LN2PI \
                + logdet
            loss = float(np.mean(logp))
            if not np.isfinite(loss):
                raise NonFiniteLoss(
                    f"training log-density became non-finite at epoch "
                    f"{epoch}")
            epoch_logp += loss * m

            # maximize mean logp: upstream gradient of mean w.r.t. z
            g = -v / m
            weight = np.full(m, 1.0 / m)
            grad_list = [{k: np.zeros_like(p) for k, p in zip(
                ("w1", "b1", "w2", "b2", "w3", "b3"), layer.params())}
                for layer in layers]
            # reversed(caches) visits layers in list order
            for (layer, cache), grads in zip(reversed(caches), grad_list):
                g = layer.backward(cache, g, weight, grads)
            _clip_gradients(grad_list, cfg.clip_norm)
            step_count += 1
            bias1 = 1.0 - cfg.momentum ** step_count
            bias2 = 1.0 - 0.999 ** step_count
            for layer, grads, m1, m2 in zip(layers, grad_list,
                                            moment1, moment2):
                new = []
                for key, p in zip(("w1", "b1", "w2", "b2", "w3", "b3"),
                                  layer.params()):
                    m1[key] = cfg.momentum * m1[key] \
                        + (1.0 - cfg.momentum) * grads[key]
                    m2[key] = 0.999 * m2[key] \
                        + 0.001 * grads[key] ** 2
                    step = (m1[key] / bias1) \
                        / (np.sqrt(m2[key] / bias2) + 1e-8)
                    new.append(p + lr * step)
                layer.set_params(new)
            if shadow is not None:
                for layer, avg in zip(layers, shadow):
                    for p, a in zip(layer.params(), avg):
                        a *= cfg.ema
                        a += (1.0 - cfg.ema) * p

        if shadow is not None:
            raw = [[p.copy() for p in layer.params()] for layer in layers]
            for layer, avg in zip(layers, shadow):
                layer.set_params(avg)
        val_logp = float(np.mean(flow.log_density_batch(
            val[:, :1] if aug else val)))
        if not np.isfinite(val_logp):
            raise NonFiniteLoss(
                f"validation log-density became non-finite at epoch "
                f"{epoch}")
        if val_logp > best_val:
            best_val = val_logp
            best_params = [[p.copy() for p in layer.params()]
                           for layer in layers]
            stale = 0
        else:
            stale += 1
            if stale % 5 == 0:
                decay *= 0.5
        if shadow is not None:
            for layer, params in zip(layers, raw):
                layer.set_params(params)
        flow.history.append((epoch,
                             epoch_logp / len(train) + standardizer.logdet,
                             val_logp, best_val))
        if stale > cfg.patience:
            break

    for layer, params in zip(layers, best_params):
        layer.set_params(params)
    return flow


def save_flow(flow: FlowModel, path):
    """Write the flow as versioned JSON, floats at 17 digits."""

    def enc(arr):
        return [[float(format(v, ".17g")) for v in row]
                for row in np.atleast_2d(arr)]

    doc = {
        "version": FLOW_VERSION,
        "dim": flow.dim,
        "augmented": flow.aug,
        "standardizer": {"mean": enc(flow.standardizer.mean)[0],
                         "std": enc(flow.standardizer.std)[0]},
        "layers": [{
            "mask": [int(v) for v in layer.mask],
            "weights": [enc(layer.w1), enc(layer.w2), enc(layer.w3)],
            "biases": [enc(layer.b1)[0], enc(layer.b2)[0],
                       enc(layer.b3)[0]],
        } for layer in flow.layers],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_flow(path) -> FlowModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise FormatError(f"cannot parse flow file {path}: {err}") from err
    try:
        version = doc["version"]
        if version != FLOW_VERSION:
            raise VersionMismatch(
                f"flow file version {version}, expected {FLOW_VERSION}")
        std = Standardizer(doc["standardizer"]["mean"],
                           doc["standardizer"]["std"])
        layers = [CouplingLayer(entry["mask"],
                                [np.array(w) for w in entry["weights"]],
                                [np.array(b) for b in entry["biases"]])
                  for entry in doc["layers"]]
        return FlowModel(doc["dim"], layers, std,
                         aug=bool(doc["augmented"]))
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"malformed flow file {path}: {err}") from err


@dataclasses.dataclass
class KDEModel:
    """Gaussian product-kernel estimate with per-coordinate bandwidth."""

    samples: np.ndarray
    bandwidth: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.bandwidth = np.asarray(self.bandwidth, dtype=float)
        if self.bandwidth.shape != (self.samples.shape[1],):
            raise DimensionMismatch(
                "bandwidth must have one entry per coordinate")
        if np.any(self.bandwidth <= 0.0):
            raise NonPositiveVariance("bandwidths must be positive")

    @classmethod
    def fit(cls, samples):
        """Scott's rule: n**(-1/(d+4)) times the coordinate spread."""
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        n, d = samples.shape
        if n < 2:
            raise TooFewSamples("KDE needs at least two samples")
        sigma = samples.std(axis=0)
        if np.any(sigma <= 0.0):
            raise NonPositiveVariance(
                "sample set has a degenerate coordinate")
        return cls(samples, n ** (-1.0 / (d + 4)) * sigma)


def kde_log_density(kde: KDEModel, x):
    """Log of the kernel mixture at one point (no gradient path)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (kde.samples.shape[1],):
        raise DimensionMismatch(
            f"expected a point of dimension {kde.samples.shape[1]}")
    z = (x - kde.samples) / kde.bandwidth
    logs = -0.5 * np.sum(z * z, axis=1) \
        - np.sum(np.log(kde.bandwidth)) \
        - 0.5 * kde.samples.shape[1] * LN2PI
    return float(logsumexp(logs) - np.log(kde.samples.shape[0]))
