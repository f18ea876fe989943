"""Gradient-boosted regression trees over metric feature vectors.

Squared-error boosting with exact greedy splits. Missing features (NaN)
follow a per-split default branch, learned as the child that received more
non-missing training rows.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .numcore import DTYPE

log = logging.getLogger(__name__)

N_METRIC_FEATURES = 28


@dataclass
class MetricFeatureVector:
    values: np.ndarray
    feature_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE).reshape(-1)
        if self.values.size != len(self.feature_names):
            raise ShapeError(
                f"{self.values.size} values for {len(self.feature_names)} feature names"
            )


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    default_left: np.ndarray
    value: np.ndarray

    @classmethod
    def leaf(cls, value: float) -> "RegressionTree":
        return cls(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                   np.array([False]), np.array([value]))

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def depth(self, node=0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            r = rows[active]
            nd = node[r]
            x = X[r, self.feature[nd]]
            go_left = np.where(np.isnan(x), self.default_left[nd], x < self.threshold[nd])
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]


@dataclass
class GbtHyperparams:
    rounds: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 1
    l2_leaf_reg: float = 1.0
    subsample: float = 1.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must be in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        if self.l2_leaf_reg < 0:
            raise ConfigError("l2_leaf_reg must be >= 0")
        if not 0 < self.subsample <= 1:
            raise ConfigError("subsample must be in (0, 1]")


INT_FIELDS = ("rounds", "max_depth", "min_samples_leaf")

DEFAULT_SPACE = {
    "rounds": (50, 500),
    "max_depth": (2, 6),
    "learning_rate": (0.02, 0.3),
    "min_samples_leaf": (1, 10),
    "l2_leaf_reg": (0.0, 5.0),
    "subsample": (0.6, 1.0),
}


@dataclass
class GbtModel:
    base_score: float
    trees: list[RegressionTree]
    shrinkage: float
    n_features: int

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=DTYPE)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected (N, {self.n_features}) features, got {X.shape}")
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += self.shrinkage * tree.apply(X)
        return out


class _TreeBuilder:
    def __init__(self, X, order, hp: GbtHyperparams):
        self.X = X
        self.order = order  # per-feature argsort of X, NaN last
        self.hp = hp

    def build(self, residual, rows_mask) -> RegressionTree:
        self.r = residual
        self.nodes = []
        self._grow(rows_mask, 0)
        cols = list(zip(*self.nodes))
        return RegressionTree(
            np.array(cols[0], dtype=np.int64),
            np.array(cols[1], dtype=DTYPE),
            np.array(cols[2], dtype=np.int64),
            np.array(cols[3], dtype=np.int64),
            np.array(cols[4], dtype=bool),
            np.array(cols[5], dtype=DTYPE),
        )

    def _grow(self, mask, depth) -> int:
        hp = self.hp
        idx = len(self.nodes)
        self.nodes.append(None)
        cnt = int(mask.sum())
        g_total = float(self.r[mask].sum())
        leaf_value = g_total / (cnt + hp.l2_leaf_reg) if cnt + hp.l2_leaf_reg > 0 else 0.0
        split = None
        if depth < hp.max_depth and cnt >= 2 * hp.min_samples_leaf and cnt >= 2:
            split = self._best_split(mask, cnt, g_total)
        if split is None:
            self.nodes[idx] = (-1, 0.0, -1, -1, False, leaf_value)
            return idx
        f, thr, default_left = split
        x = self.X[:, f]
        miss = np.isnan(x)
        go_left = np.where(miss, default_left, x < thr)
        left = self._grow(mask & go_left, depth + 1)
        right = self._grow(mask & ~go_left, depth + 1)
        self.nodes[idx] = (f, thr, left, right, bool(default_left), 0.0)
        return idx

    def _best_split(self, mask, cnt, g_total):
        hp = self.hp
        n_feat = self.X.shape[1]
        keep = mask[self.order]  # (N, F)
        sub = self.order.T[keep.T].reshape(n_feat, cnt)
        xs = self.X[sub, np.arange(n_feat)[:, None]]
        rs = self.r[sub]
        miss = np.isnan(xs)
        nn = cnt - miss.sum(axis=1)  # non-missing rows per feature
        gcum = np.cumsum(np.where(miss, 0.0, rs), axis=1)
        g_nm = gcum[np.arange(n_feat), np.maximum(nn - 1, 0)]
        g_nm = np.where(nn > 0, g_nm, 0.0)
        g_miss = (g_total - g_nm)[:, None]
        n_miss = (cnt - nn)[:, None]

        pos = np.arange(cnt - 1)[None, :]
        nl = (pos + 1).astype(DTYPE)
        nr = nn[:, None] - nl
        with np.errstate(invalid="ignore"):
            valid = (pos + 1 < nn[:, None]) & (xs[:, :-1] < xs[:, 1:])
        dleft = nl >= nr
        gl = gcum[:, :-1] + np.where(dleft, g_miss, 0.0)
        gr = g_total - gl
        cl = nl + np.where(dleft, n_miss, 0)
        cr = cnt - cl
        valid &= (cl >= hp.min_samples_leaf) & (cr >= hp.min_samples_leaf)
        lam = hp.l2_leaf_reg
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = gl**2 / (cl + lam) + gr**2 / (cr + lam) - g_total**2 / (cnt + lam)
        gain = np.where(valid, gain, -np.inf)
        best = int(np.argmax(gain))
        f, p = divmod(best, cnt - 1)
        if not gain[f, p] > 0:
            return None
        thr = 0.5 * (xs[f, p] + xs[f, p + 1])
        return f, float(thr), bool(dleft[f, p])


def _check_xy(X, y):
    X = np.asarray(X, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ShapeError(f"feature matrix {X.shape} does not match {y.size} labels")
    if y.size < 2:
        raise DataError(f"need at least 2 training rows, got {y.size}")
    if not np.isfinite(y).all():
        raise DataError(f"non-finite label at row {int(np.where(~np.isfinite(y))[0][0])}")
    return X, y


def gbt_train(X, y, hp: GbtHyperparams, seed=0, history=None) -> GbtModel:
    """Fit ``rounds`` trees to running residuals.

    If ``history`` is a list, in-sample MSE after each round is appended.
    """
    X, y = _check_xy(X, y)
    n = y.size
    rng = np.random.default_rng(seed)
    order = np.argsort(X, axis=0, kind="stable")
    builder = _TreeBuilder(X, order, hp)
    base = float(np.mean(y))
    pred = np.full(n, base)
    trees = []
    n_sub = max(1, int(round(hp.subsample * n)))
    for _ in range(hp.rounds):
        if n_sub < n:
            mask = np.zeros(n, dtype=bool)
            mask[rng.choice(n, size=n_sub, replace=False)] = True
        else:
            mask = np.ones(n, dtype=bool)
        tree = builder.build(y - pred, mask)
        trees.append(tree)
        pred += hp.learning_rate * tree.apply(X)
        if history is not None:
            history.append(float(np.mean((y - pred) ** 2)))
    return GbtModel(base, trees, hp.learning_rate, X.shape[1])


def gbt_predict(model: GbtModel, x) -> float:
    values = x.values if isinstance(x, MetricFeatureVector) else np.asarray(x, dtype=DTYPE)
    values = values.reshape(-1)
    if values.size != model.n_features:
        raise ShapeError(f"expected {model.n_features} features, got {values.size}")
    return float(model.predict(values[None])[0])


@dataclass
class CvEnsemble:
    models: list[GbtModel]
    fold_mse: list[float]

    @property
    def mean_cv_mse(self) -> float:
        return float(np.mean(self.fold_mse))

    def predict(self, X) -> np.ndarray:
        return np.mean([m.predict(X) for m in self.models], axis=0)


def fold_partition(n, folds, seed) -> list[np.ndarray]:
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    if folds > n:
        raise ConfigError(f"{folds} folds requested for {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


def cv_train(X, y, hp: GbtHyperparams, folds=10, seed=0) -> CvEnsemble:
    X, y = _check_xy(X, y)
    parts = fold_partition(y.size, folds, seed)
    models, scores = [], []
    for k, val in enumerate(parts):
        tr = np.concatenate([p for j, p in enumerate(parts) if j != k])
        if tr.size < 2:
            raise DataError(f"fold {k} leaves fewer than 2 training rows")
        m = gbt_train(X[tr], y[tr], hp, seed + k)
        models.append(m)
        scores.append(float(np.mean((m.predict(X[val]) - y[val]) ** 2)))
    return CvEnsemble(models, scores)


def _sample(rng, name, choice):
    if isinstance(choice, list):
        if not choice:
            raise ConfigError(f"empty choice list for {name}")
        return choice[int(rng.integers(len(choice)))]
    lo, hi = choice
    if lo > hi:
        raise ConfigError(f"empty range for {name}: ({lo}, {hi})")
    if name in INT_FIELDS:
        return int(rng.integers(int(lo), int(hi) + 1))
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def hp_search(X, y, space=None, trials=20, folds=10, seed=0, base=None):
    """Seeded random search; returns ``(best_hp, best_mse, trace)``.

    ``space`` maps a hyperparameter name to an inclusive ``(lo, hi)`` range
    or a list of discrete choices. Names left out keep ``base`` values.
    Earlier trials win ties.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    space = DEFAULT_SPACE if space is None else space
    known = {f.name for f in fields(GbtHyperparams)}
    unknown = set(space) - known
    if unknown:
        raise ConfigError(f"unknown hyperparameters in space: {sorted(unknown)}")
    base = base or GbtHyperparams()
    rng = np.random.default_rng(seed)
    trace = []
    best, best_mse = None, np.inf
    for t in range(trials):
        values = {name: _sample(rng, name, space[name]) for name in sorted(space)}
        hp = replace(base, **values)
        mse = cv_train(X, y, hp, folds, seed).mean_cv_mse
        trace.append((hp, mse))
        log.info("trial %d mse %.5f %s", t, mse, asdict(hp))
        if mse < best_mse:
            best, best_mse = hp, mse
    return best, best_mse, trace


@dataclass
class FusionModel:
    """One cross-validated booster per aesthetics axis."""

    feature_names: list[str]
    axes: list[CvEnsemble]
    hyperparams: list[GbtHyperparams]

    def predict(self, X) -> np.ndarray:
        return np.stack([cv.predict(X) for cv in self.axes], axis=1)
