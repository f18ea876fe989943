"""Evaluation: MSE, LCC, SRCC and Kendall tau-b per axis and level.

Correlations of a zero-variance input are defined as 0. Sums go through
``math.fsum`` so results do not depend on summation order.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .numcore import DTYPE

AXIS_NAMES = ("PQ", "PC", "CE", "CU")
LEVELS = ("utterance", "system")
METRICS = ("mse", "lcc", "srcc", "ktau")


@dataclass
class MetricBundle:
    mse: float
    lcc: float
    srcc: float
    ktau: float

    def get(self, name: str) -> float:
        return getattr(self, name)


def _vectors(pred, gt):
    pred = np.asarray(pred, dtype=DTYPE).reshape(-1)
    gt = np.asarray(gt, dtype=DTYPE).reshape(-1)
    if pred.size != gt.size:
        raise DataError(f"{pred.size} predictions for {gt.size} ground-truth values")
    if pred.size < 2:
        raise DataError(f"need at least 2 values, got {pred.size}")
    if not (np.isfinite(pred).all() and np.isfinite(gt).all()):
        raise DataError("values must be finite")
    return pred, gt


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    n = x.size
    dx = x - math.fsum(x) / n
    dy = y - math.fsum(y) / n
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=DTYPE)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(x.size, dtype=DTYPE)
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], x.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def spearman(x, y) -> float:
    return pearson(average_ranks(x), average_ranks(y))


def kendall_tau_b(x, y) -> float:
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    n = x.size
    iu = np.triu_indices(n, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    s = int(np.sum(sx * sy))
    n0 = n * (n - 1) // 2
    ties_x = int(np.sum(sx == 0))
    ties_y = int(np.sum(sy == 0))
    denom = (n0 - ties_x) * (n0 - ties_y)
    if denom == 0:
        return 0.0
    return max(-1.0, min(1.0, s / math.sqrt(denom)))


def utterance_metrics(pred, gt) -> MetricBundle:
    pred, gt = _vectors(pred, gt)
    d = pred - gt
    return MetricBundle(
        mse=math.fsum(d * d) / d.size,
        lcc=pearson(pred, gt),
        srcc=spearman(pred, gt),
        ktau=kendall_tau_b(pred, gt),
    )


def system_means(values, system_ids):
    """Per-system means in first-appearance order of the ids."""
    values = np.asarray(values, dtype=DTYPE).reshape(-1)
    groups: OrderedDict[str, list[float]] = OrderedDict()
    for v, s in zip(values, system_ids):
        groups.setdefault(s, []).append(v)
    return list(groups), np.array([math.fsum(g) / len(g) for g in groups.values()])


def system_metrics(pred, gt, system_ids) -> MetricBundle:
    pred, gt = _vectors(pred, gt)
    if len(system_ids) != pred.size:
        raise DataError(f"{len(system_ids)} system ids for {pred.size} values")
    names, pm = system_means(pred, system_ids)
    if len(names) < 2:
        raise DataError("system-level metrics need at least 2 distinct systems")
    _, gm = system_means(gt, system_ids)
    return utterance_metrics(pm, gm)


@dataclass
class EvalReport:
    """``cells[level][axis]`` holds a MetricBundle; ``overall[level]`` the axis mean."""

    cells: dict
    overall: dict

    def value(self, level, axis, metric) -> float:
        if axis == "overall":
            return self.overall[level].get(metric)
        return self.cells[level][axis].get(metric)

    def rows(self, model_name="model"):
        header = ["model", "level", "metric", *AXIS_NAMES, "overall"]
        body = []
        for level in LEVELS:
            for metric in METRICS:
                body.append(
                    [model_name, level, metric]
                    + [self.cells[level][a].get(metric) for a in AXIS_NAMES]
                    + [self.overall[level].get(metric)]
                )
        return header, body

    def to_csv(self, model_name="model") -> str:
        header, body = self.rows(model_name)
        lines = [",".join(header)]
        for row in body:
            lines.append(",".join(row[:3] + [f"{v:.6f}" for v in row[3:]]))
        return "\n".join(lines) + "\n"


def full_report(predictions: dict, labels: dict, system_ids: dict) -> EvalReport:
    """Evaluate id-keyed 4-axis predictions against id-keyed labels.

    Values may be AesScores or length-4 sequences.
    """
    missing_pred = sorted(set(labels) - set(predictions))
    missing_lab = sorted(set(predictions) - set(labels))
    if missing_pred or missing_lab:
        raise DataError(
            f"id mismatch: no prediction for {missing_pred[:10]}, "
            f"no label for {missing_lab[:10]}"
        )
    ids = sorted(labels)
    no_sys = [i for i in ids if i not in system_ids]
    if no_sys:
        raise DataError(f"no system id for {no_sys[:10]}")

    def matrix(d):
        return np.array([_as4(d[i]) for i in ids])

    P, G = matrix(predictions), matrix(labels)
    sys = [system_ids[i] for i in ids]
    cells = {"utterance": {}, "system": {}}
    for a, axis in enumerate(AXIS_NAMES):
        cells["utterance"][axis] = utterance_metrics(P[:, a], G[:, a])
        cells["system"][axis] = system_metrics(P[:, a], G[:, a], sys)
    overall = {
        level: MetricBundle(*[
            math.fsum(cells[level][a].get(m) for a in AXIS_NAMES) / len(AXIS_NAMES)
            for m in METRICS
        ])
        for level in LEVELS
    }
    return EvalReport(cells, overall)


def _as4(v):
    if hasattr(v, "as_array"):
        return v.as_array()
    return np.asarray(v, dtype=DTYPE).reshape(4)
