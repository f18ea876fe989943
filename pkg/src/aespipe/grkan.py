"""Group-rational KAN layers.

Each layer applies a learnable safe-Pade rational function
``P(x) / (1 + |Q(x)|)`` to its inputs, one function shared per contiguous
channel group, and then an affine map ``Y = f(X) W^T + bias``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FitError, NumericError, ShapeError
from .numcore import DTYPE, as_matrix

DEFAULT_ORDER = (5, 4)
DEFAULT_GROUPS = 8
GAIN_SAMPLES = 10_000


@dataclass
class RationalActivation:
    """``num`` holds a_0..a_m, ``den`` holds b_1..b_n."""

    num: np.ndarray
    den: np.ndarray

    def __post_init__(self):
        self.num = np.asarray(self.num, dtype=DTYPE).reshape(-1)
        self.den = np.asarray(self.den, dtype=DTYPE).reshape(-1)
        if self.num.size == 0:
            raise ConfigError("numerator needs at least the constant coefficient")

    @property
    def order(self) -> tuple[int, int]:
        return self.num.size - 1, self.den.size

    @classmethod
    def identity(cls, order=DEFAULT_ORDER) -> "RationalActivation":
        m, n = order
        if m < 1:
            raise ConfigError(f"order {order} cannot represent the identity")
        num = np.zeros(m + 1)
        num[1] = 1.0
        return cls(num, np.zeros(n))


def _powers(x: np.ndarray, k: int) -> np.ndarray:
    # x[..., None] ** [0..k-1], built by repeated products so x**0 == 1 exactly
    out = np.empty(x.shape + (max(k, 1),), dtype=DTYPE)
    out[..., 0] = 1.0
    for i in range(1, k):
        out[..., i] = out[..., i - 1] * x
    return out[..., :k]


def _parts(num, den, x):
    """Shared pieces for evaluation and differentiation.

    ``num``/``den`` broadcast against ``x[..., None]``.
    """
    m1, n = num.shape[-1], den.shape[-1]
    pw = _powers(x, max(m1, n + 1))
    p = np.sum(num * pw[..., :m1], axis=-1)
    q = np.sum(den * pw[..., 1 : n + 1], axis=-1) if n else np.zeros_like(x)
    d = 1.0 + np.abs(q)
    return pw, p, q, d


def rational_eval(act: RationalActivation, x):
    x = np.asarray(x, dtype=DTYPE)
    if not np.isfinite(x).all():
        raise NumericError("rational_eval input must be finite")
    _, p, _, d = _parts(act.num, act.den, x)
    return p / d if x.ndim else float(p / d)


def rational_grad(act: RationalActivation, x):
    """Return ``(d/dx, d/da, d/db)``; the coefficient partials gain a trailing axis.

    ``sign(0) = 0`` is used for the absolute value, so at roots of ``Q`` the
    denominator contributes nothing.
    """
    x = np.asarray(x, dtype=DTYPE)
    if not np.isfinite(x).all():
        raise NumericError("rational_grad input must be finite")
    dx, da, db = _grad(act.num, act.den, x)
    if x.ndim == 0:
        return float(dx), da, db
    return dx, da, db


def _grad(num, den, x):
    m1, n = num.shape[-1], den.shape[-1]
    pw, p, q, d = _parts(num, den, x)
    s = np.sign(q)
    da = pw[..., :m1] / d[..., None]
    coef = -(p * s) / (d * d)
    db = coef[..., None] * pw[..., 1 : n + 1]
    i = np.arange(1, m1, dtype=DTYPE)
    dp = np.sum(num[..., 1:] * i * pw[..., : m1 - 1], axis=-1) if m1 > 1 else 0.0
    if n:
        j = np.arange(1, n + 1, dtype=DTYPE)
        dq = np.sum(den * j * pw[..., :n], axis=-1)
    else:
        dq = 0.0
    dx = dp / d + coef * dq
    return dx, da, db


@dataclass
class GrKanLayer:
    """Grouped rational activations followed by an affine map.

    Coefficients are stored stacked: ``num`` is ``(groups, m+1)`` and ``den``
    is ``(groups, n)``; ``activations`` exposes per-group views.
    """

    num: np.ndarray
    den: np.ndarray
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.num = np.atleast_2d(np.asarray(self.num, dtype=DTYPE))
        self.den = np.asarray(self.den, dtype=DTYPE).reshape(self.num.shape[0], -1)
        self.weight = as_matrix(self.weight)
        self.bias = np.asarray(self.bias, dtype=DTYPE).reshape(-1)
        if self.bias.size != self.weight.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.size} != out_dim {self.weight.shape[0]}"
            )
        if self.in_dim % self.groups:
            raise ConfigError(
                f"groups={self.groups} does not divide in_dim={self.in_dim}"
            )

    @classmethod
    def from_activations(cls, activations, weight, bias) -> "GrKanLayer":
        acts = list(activations)
        orders = {a.order for a in acts}
        if len(orders) != 1:
            raise ConfigError(f"all groups must share one order, got {sorted(orders)}")
        num = np.stack([a.num for a in acts])
        den = np.stack([a.den for a in acts])
        return cls(num, den, weight, bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def groups(self) -> int:
        return self.num.shape[0]

    @property
    def order(self) -> tuple[int, int]:
        return self.num.shape[1] - 1, self.den.shape[1]

    @property
    def activations(self) -> list[RationalActivation]:
        return [RationalActivation(self.num[k], self.den[k]) for k in range(self.groups)]

    def n_activation_params(self) -> int:
        return self.num.size + self.den.size

    def _grouped(self, X):
        return X.reshape(X.shape[0], self.groups, self.in_dim // self.groups)

    def activate(self, X) -> np.ndarray:
        Xg = self._grouped(X)
        _, p, _, d = _parts(self.num[None, :, None, :], self.den[None, :, None, :], Xg)
        return (p / d).reshape(X.shape)

    def forward(self, X) -> np.ndarray:
        return grkan_forward(self, X)

    def backward(self, X, dY):
        """Gradients of a scalar loss given ``dY = dL/dY`` at input ``X``.

        Returns ``(dX, grads)`` with ``grads`` keyed like the layer fields.
        """
        Xg = self._grouped(X)
        dx, da, db = _grad(self.num[None, :, None, :], self.den[None, :, None, :], Xg)
        U = self.activate(X)
        dU = dY @ self.weight
        dUg = self._grouped(dU)
        grads = {
            "num": np.einsum("ngc,ngck->gk", dUg, da),
            "den": np.einsum("ngc,ngck->gk", dUg, db),
            "weight": dY.T @ U,
            "bias": dY.sum(axis=0),
        }
        dX = (dUg * dx).reshape(X.shape)
        return dX, grads

    def parameters(self) -> list[np.ndarray]:
        return [self.num, self.den, self.weight, self.bias]


def grkan_forward(layer: GrKanLayer, X) -> np.ndarray:
    X = as_matrix(X)
    if X.shape[1] != layer.in_dim:
        raise ShapeError(f"input has {X.shape[1]} columns, layer expects {layer.in_dim}")
    return layer.activate(X) @ layer.weight.T + layer.bias


def init_grkan(in_dim, out_dim, groups=DEFAULT_GROUPS, order=DEFAULT_ORDER, seed=0) -> GrKanLayer:
    if groups < 1 or in_dim % groups:
        raise ConfigError(f"groups={groups} does not divide in_dim={in_dim}")
    rng = np.random.default_rng(seed)
    ident = RationalActivation.identity(order)
    z = rng.standard_normal(GAIN_SAMPLES)
    gain = float(np.mean(rational_eval(ident, z) ** 2))
    weight = rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / (in_dim * gain))
    return GrKanLayer(
        np.tile(ident.num, (groups, 1)),
        np.tile(ident.den, (groups, 1)),
        weight,
        np.zeros(out_dim),
    )


def activation_gain(act: RationalActivation, seed=0) -> float:
    """Monte-Carlo estimate of E[f(z)^2] for standard-normal z."""
    z = np.random.default_rng(seed).standard_normal(GAIN_SAMPLES)
    return float(np.mean(rational_eval(act, z) ** 2))


def fit_rational_to_function(samples, order=DEFAULT_ORDER, max_passes=10, tol=1e-10):
    """Least-squares fit of a safe-Pade rational to ``(x, f(x))`` samples.

    The numerator is solved exactly for a fixed denominator; between those
    solves the denominator is refit from the linearized problem
    ``P(x) - f(x) * sign(Q) * Q(x) = f(x)`` weighted by the previous
    denominator. Returns ``(activation, rms_residual)`` for the best pass.
    """
    pts = np.asarray(samples, dtype=DTYPE)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError("samples must be a sequence of (x, f(x)) pairs")
    x, y = pts[:, 0], pts[:, 1]
    m, n = order
    if m < 0 or n < 0:
        raise ConfigError(f"invalid order {order}")
    if x.size < m + n + 1:
        raise FitError(f"order {order} needs at least {m + n + 1} samples, got {x.size}")
    if np.unique(x).size != x.size:
        raise FitError("sample x values must be distinct")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise NumericError("samples must be finite")

    pw = _powers(x, max(m + 1, n + 1))
    V = pw[:, : m + 1]
    if np.linalg.matrix_rank(V) < m + 1:
        raise FitError(f"rank-deficient design for order {order}")
    X = pw[:, 1 : n + 1]

    def refit_numerator(b):
        d = 1.0 + np.abs(X @ b) if n else np.ones_like(x)
        a = np.linalg.lstsq(V / d[:, None], y, rcond=None)[0]
        r = np.sqrt(np.mean(((V @ a) / d - y) ** 2))
        return a, d, r

    b = np.zeros(n)
    a, d, res = refit_numerator(b)
    best = (a, b, res)
    if n:
        for _ in range(max_passes):
            s = np.sign(X @ b)
            s[s == 0] = 1.0
            A = np.hstack([V, -(y * s)[:, None] * X]) / d[:, None]
            sol = np.linalg.lstsq(A, y / d, rcond=None)[0]
            b = sol[m + 1 :]
            a, d, new_res = refit_numerator(b)
            if new_res < best[2]:
                best = (a, b, new_res)
            if abs(res - new_res) < tol:
                break
            res = new_res
    a, b, res = best
    return RationalActivation(a, b), float(res)


def import_mlp(weights, activation_samples, order=DEFAULT_ORDER, groups=1) -> list[GrKanLayer]:
    """Convert an MLP ``W_k f(... W_1 x + b_1 ...) + b_k`` into GR-KAN layers.

    The first layer gets an identity activation; later layers get a rational
    fitted to ``activation_samples``.
    """
    weights = [(as_matrix(W), np.asarray(b, dtype=DTYPE).reshape(-1)) for W, b in weights]
    if not weights:
        raise ShapeError("MLP has no layers")
    for k in range(1, len(weights)):
        if weights[k][0].shape[1] != weights[k - 1][0].shape[0]:
            raise ShapeError(
                f"layer {k} expects {weights[k][0].shape[1]} inputs but layer "
                f"{k - 1} produces {weights[k - 1][0].shape[0]}"
            )
    fitted = None
    if len(weights) > 1:
        fitted, _ = fit_rational_to_function(activation_samples, order)
    layers = []
    for k, (W, b) in enumerate(weights):
        act = RationalActivation.identity(order) if k == 0 else fitted
        if W.shape[1] % groups:
            raise ConfigError(f"groups={groups} does not divide in_dim={W.shape[1]}")
        layers.append(GrKanLayer.from_activations([act] * groups, W.copy(), b.copy()))
    return layers
