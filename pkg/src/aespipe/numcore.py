"""Dense numeric helpers: checked matmul, stable softmax, gradient checking.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NumericError("matmul operands must be finite")
    return a @ b


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"softmax needs a non-empty vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise NumericError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


@dataclass
class GradReport:
    max_abs_diff: float
    max_rel_diff: float
    passed: bool
    diffs: list[tuple[int, float, float]] = field(default_factory=list)

    def worst(self, k: int = 5):
        """The ``k`` coordinates with the largest relative disagreement."""
        return sorted(
            self.diffs,
            key=lambda d: -abs(d[1] - d[2]) / max(1.0, abs(d[1])),
        )[:k]


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params,
    eps: float = 1e-6,
    tol: float = 1e-6,
    skip: Callable[[int], bool] | None = None,
) -> GradReport:
    """Compare ``f``'s analytic gradient with central differences.

    ``f(p)`` must return ``(value, gradient)``. Relative differences use the
    denominator ``max(1, |analytic|)``. Coordinates for which ``skip(i)`` is
    true are left out of the comparison.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(params, dtype=DTYPE).ravel()
    value, analytic = f(p.copy())
    analytic = np.asarray(analytic, dtype=DTYPE).ravel()
    if not np.isfinite(value):
        raise NumericError("function value is not finite at params")
    if analytic.shape != p.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != params {p.shape}")

    diffs = []
    max_abs = 0.0
    max_rel = 0.0
    for i in range(p.size):
        if skip is not None and skip(i):
            continue
        hi = p.copy()
        lo = p.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi = f(hi)[0]
        f_lo = f(lo)[0]
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericError(f"function value not finite near coordinate {i}")
        numeric = (f_hi - f_lo) / (2.0 * eps)
        a = float(analytic[i])
        d = abs(a - numeric)
        max_abs = max(max_abs, d)
        max_rel = max(max_rel, d / max(1.0, abs(a)))
        diffs.append((i, a, float(numeric)))
    return GradReport(max_abs, max_rel, max_rel <= tol, diffs)
