"""Convex stacking of member predictions with exhaustive lattice search."""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .evalmetrics import spearman
from .numcore import DTYPE
from .predictor import SCORE_RANGE, clamp

# Scores this close to the current optimum count as ties.
TIE_TOL = 1e-12


@dataclass
class PredictionTable:
    """One axis: ``preds[i, k]`` is member k's prediction for utterance i."""

    preds: np.ndarray
    truth: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.preds = np.asarray(self.preds, dtype=DTYPE)
        if self.preds.ndim == 1:
            self.preds = self.preds[:, None]
        self.truth = np.asarray(self.truth, dtype=DTYPE).reshape(-1)
        if self.preds.shape[0] != self.truth.size or len(self.ids) != self.truth.size:
            raise ShapeError("prediction rows, truth and ids must align")
        if not (np.isfinite(self.preds).all() and np.isfinite(self.truth).all()):
            raise DataError("prediction table contains non-finite values")

    @property
    def n_members(self) -> int:
        return self.preds.shape[1]


@dataclass
class EnsembleWeights:
    weights: np.ndarray  # (axes, K)
    step: float

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=DTYPE))
        for w in self.weights:
            check_convex(w)


def check_convex(w, tol=1e-9):
    w = np.asarray(w, dtype=DTYPE)
    if (w < -tol).any() or abs(w.sum() - 1.0) > tol:
        raise ConfigError(f"weights {w.tolist()} are not convex")


def stack_predict(table: PredictionTable, w) -> np.ndarray:
    w = np.asarray(w, dtype=DTYPE).reshape(-1)
    if w.size != table.n_members:
        raise ShapeError(f"{w.size} weights for {table.n_members} members")
    check_convex(w)
    return clamp(table.preds @ w, SCORE_RANGE)


def lattice_size(step, k) -> int:
    return comb(_parts(step) + k - 1, k - 1)


def _parts(step) -> int:
    if not step > 0:
        raise ConfigError("step must be positive")
    s = round(1.0 / step)
    if s < 1 or abs(s * step - 1.0) > 1e-9:
        raise ConfigError(f"step {step} does not divide 1")
    return s


def lattice(step, k) -> np.ndarray:
    """All convex weight vectors with entries in multiples of ``step``.

    Rows come in ascending lexicographic order.
    """
    s = _parts(step)
    if k < 1:
        raise ConfigError("need at least one member")
    out = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + [remaining])
            return
        for c in range(remaining + 1):
            rec(prefix + [c], remaining - c, slots - 1)

    rec([], s, k)
    return np.array(out, dtype=DTYPE) / s


def _score(objective, pred, truth):
    if objective == "mse":
        d = pred - truth
        return float(np.mean(d * d))
    return spearman(pred, truth)


def grid_search_weights(table: PredictionTable, step=0.1, objective="mse"):
    """Best lattice point for one axis; returns ``(weights, score)``.

    MSE is minimized, SRCC maximized. Ties go to the earliest lattice point.
    """
    if objective not in ("mse", "srcc"):
        raise ConfigError(f"unknown objective {objective!r}")
    if objective == "srcc" and table.truth.size < 2:
        raise DataError("srcc objective needs at least 2 utterances")
    cands = lattice(step, table.n_members)
    stacked = clamp(table.preds @ cands.T, SCORE_RANGE)
    sign = 1.0 if objective == "mse" else -1.0
    best_i, best = 0, np.inf
    for i in range(cands.shape[0]):
        s = sign * _score(objective, stacked[:, i], table.truth)
        if i == 0 or s < best - TIE_TOL * (1.0 + abs(best)):
            best_i, best = i, s
    return cands[best_i], sign * best


def fit_ensemble(tables, step=0.1, objective="mse"):
    """Independent search per axis; returns ``(EnsembleWeights, scores)``."""
    ws, scores = [], []
    for t in tables:
        w, s = grid_search_weights(t, step, objective)
        ws.append(w)
        scores.append(s)
    return EnsembleWeights(np.stack(ws), step), scores
