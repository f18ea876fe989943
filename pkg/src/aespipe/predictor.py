"""Four-axis aesthetics regressor over layered, framed embeddings.

Each axis owns a softmax-normalized layer weighting and a stack of GR-KAN
layers. Frames are averaged without weights, so a clip is reduced to its
``(L, D)`` per-layer time means before anything learnable happens.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .grkan import DEFAULT_GROUPS, DEFAULT_ORDER, GrKanLayer, init_grkan
from .numcore import DTYPE, softmax

log = logging.getLogger(__name__)

AXES = ("pq", "pc", "ce", "cu")
SCORE_RANGE = (1.0, 10.0)


@dataclass
class EmbeddingTensor:
    data: np.ndarray  # [layer][frame][dim]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=DTYPE)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"embedding must be a non-empty L x T x D array, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError("embedding contains non-finite values")

    @property
    def layers(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> int:
        return self.data.shape[2]

    def time_pool(self) -> np.ndarray:
        return self.data.mean(axis=1)


@dataclass
class LayerAggregator:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=DTYPE).reshape(-1)

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits)


@dataclass
class AesScores:
    pq: float
    pc: float
    ce: float
    cu: float

    def as_array(self) -> np.ndarray:
        return np.array([self.pq, self.pc, self.ce, self.cu], dtype=DTYPE)

    @classmethod
    def from_array(cls, values) -> "AesScores":
        values = [float(v) for v in values]
        if len(values) != 4:
            raise ShapeError(f"expected 4 axis values, got {len(values)}")
        return cls(*values)


@dataclass
class AxisHead:
    aggregator: LayerAggregator
    layers: list[GrKanLayer]


@dataclass
class AesPredictor:
    heads: list[AxisHead]
    score_range: tuple[float, float] = SCORE_RANGE

    def __post_init__(self):
        if len(self.heads) != len(AXES):
            raise ConfigError(f"expected {len(AXES)} heads, got {len(self.heads)}")
        dims = {h.layers[0].in_dim for h in self.heads}
        if len(dims) != 1:
            raise ShapeError(f"heads disagree on input dimension: {sorted(dims)}")
        for axis, head in zip(AXES, self.heads):
            if head.layers[-1].out_dim != 1:
                raise ShapeError(f"{axis} head must end in a single output")
            for k in range(1, len(head.layers)):
                if head.layers[k].in_dim != head.layers[k - 1].out_dim:
                    raise ShapeError(f"{axis} head layer {k} does not chain")

    @property
    def n_layers(self) -> int:
        return self.heads[0].aggregator.logits.size

    @property
    def dim(self) -> int:
        return self.heads[0].layers[0].in_dim

    def parameters(self) -> list[np.ndarray]:
        params = []
        for head in self.heads:
            params.append(head.aggregator.logits)
            for layer in head.layers:
                params.extend(layer.parameters())
        return params

    def decay_mask(self) -> list[bool]:
        """Decoupled weight decay only touches affine weight matrices."""
        mask = []
        for head in self.heads:
            mask.append(False)
            for _ in head.layers:
                mask.extend([False, False, True, False])
        return mask

    def activation_mask(self) -> list[bool]:
        """True for rational coefficient arrays."""
        mask = []
        for head in self.heads:
            mask.append(False)
            for _ in head.layers:
                mask.extend([True, True, False, False])
        return mask

    def architecture(self) -> dict:
        first = self.heads[0].layers
        return {
            "layers": self.n_layers,
            "dim": self.dim,
            "hidden": tuple(l.out_dim for l in first[:-1]),
            "groups": first[0].groups,
            "order": first[0].order,
        }


def init_predictor(
    n_layers, dim, hidden=(64,), groups=DEFAULT_GROUPS, order=DEFAULT_ORDER, seed=0
) -> AesPredictor:
    """Fresh model: uniform layer weights, identity activations.

    The last bias starts at the middle of the score range so raw outputs
    begin on the label scale.
    """
    widths = [dim, *hidden, 1]
    for w in widths[:-1]:
        if w % groups:
            raise ConfigError(f"groups={groups} does not divide layer width {w}")
    seeds = np.random.SeedSequence(seed).generate_state(len(AXES) * (len(widths) - 1))
    heads = []
    k = 0
    for _ in AXES:
        layers = []
        for i in range(len(widths) - 1):
            layers.append(init_grkan(widths[i], widths[i + 1], groups, order, int(seeds[k])))
            k += 1
        layers[-1].bias[:] = 0.5 * (SCORE_RANGE[0] + SCORE_RANGE[1])
        heads.append(AxisHead(LayerAggregator(np.zeros(n_layers)), layers))
    return AesPredictor(heads)


def aggregate(emb: EmbeddingTensor, agg: LayerAggregator) -> np.ndarray:
    if agg.logits.size != emb.layers:
        raise ShapeError(f"aggregator has {agg.logits.size} logits for {emb.layers} layers")
    return agg.weights @ emb.time_pool()


def _check_pooled(model: AesPredictor, pooled: np.ndarray):
    if pooled.ndim != 3 or pooled.shape[1:] != (model.n_layers, model.dim):
        raise ShapeError(
            f"expected pooled inputs (N, {model.n_layers}, {model.dim}), got {pooled.shape}"
        )


def predict_raw(model: AesPredictor, pooled) -> np.ndarray:
    """Unclamped ``(N, 4)`` outputs for ``(N, L, D)`` time-pooled inputs."""
    pooled = np.asarray(pooled, dtype=DTYPE)
    _check_pooled(model, pooled)
    out = np.empty((pooled.shape[0], len(AXES)))
    for a, head in enumerate(model.heads):
        h = np.einsum("nld,l->nd", pooled, head.aggregator.weights)
        for layer in head.layers:
            h = layer.forward(h)
        out[:, a] = h[:, 0]
    return out


def clamp(values, score_range=SCORE_RANGE):
    return np.clip(values, score_range[0], score_range[1])


def predict_pooled(model: AesPredictor, pooled) -> np.ndarray:
    return clamp(predict_raw(model, pooled), model.score_range)


def predict(model: AesPredictor, emb: EmbeddingTensor) -> AesScores:
    if emb.dims != model.dim or emb.layers != model.n_layers:
        raise ShapeError(
            f"embedding is {emb.layers}x{emb.dims}, model expects {model.n_layers}x{model.dim}"
        )
    return AesScores.from_array(predict_pooled(model, emb.time_pool()[None])[0])


def loss_and_grads(model: AesPredictor, pooled, labels):
    """Mean over axes of per-axis MSE on raw outputs, with exact gradients.

    Gradients are returned in ``model.parameters()`` order.
    """
    pooled = np.asarray(pooled, dtype=DTYPE)
    labels = np.asarray(labels, dtype=DTYPE)
    _check_pooled(model, pooled)
    n = pooled.shape[0]
    total = 0.0
    grads = []
    for a, head in enumerate(model.heads):
        w = head.aggregator.weights
        h = np.einsum("nld,l->nd", pooled, w)
        inputs = []
        for layer in head.layers:
            inputs.append(h)
            h = layer.forward(h)
        err = h[:, 0] - labels[:, a]
        total += float(np.mean(err**2))
        dh = (2.0 / (n * len(AXES))) * err[:, None]
        layer_grads = []
        for layer, x in zip(reversed(head.layers), reversed(inputs)):
            dh, g = layer.backward(x, dh)
            layer_grads.append(g)
        dw = np.einsum("nd,nld->l", dh, pooled)
        grads.append(w * (dw - w @ dw))
        for g in reversed(layer_grads):
            grads.extend([g["num"], g["den"], g["weight"], g["bias"]])
    return total / len(AXES), grads


def get_flat(model: AesPredictor) -> np.ndarray:
    return np.concatenate([p.ravel() for p in model.parameters()])


def set_flat(model: AesPredictor, vec) -> None:
    vec = np.asarray(vec, dtype=DTYPE)
    i = 0
    for p in model.parameters():
        p[...] = vec[i : i + p.size].reshape(p.shape)
        i += p.size
    if i != vec.size:
        raise ShapeError(f"flat vector has {vec.size} values, model has {i}")


@dataclass
class AesDataset:
    """Clips reduced to per-layer time means, with optional labels.

    Unlabeled rows carry NaN labels; ``pseudo`` marks teacher-made labels.
    """

    ids: list[str]
    system_ids: list[str]
    pooled: np.ndarray
    labels: np.ndarray
    pseudo: np.ndarray = None

    def __post_init__(self):
        self.pooled = np.asarray(self.pooled, dtype=DTYPE)
        n = len(self.ids)
        if self.pooled.ndim != 3 or self.pooled.shape[0] != n:
            raise ShapeError(f"pooled array {self.pooled.shape} does not match {n} ids")
        self.labels = np.asarray(self.labels, dtype=DTYPE).reshape(n, len(AXES))
        if self.pseudo is None:
            self.pseudo = np.zeros(n, dtype=bool)
        self.pseudo = np.asarray(self.pseudo, dtype=bool).reshape(n)
        if len(self.system_ids) != n:
            raise ShapeError("system_ids length does not match ids")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_embeddings(cls, ids, system_ids, embeddings, labels=None) -> "AesDataset":
        pooled = [e.time_pool() for e in embeddings]
        n = len(ids)
        if labels is None:
            labels = np.full((n, len(AXES)), np.nan)
        pooled = np.stack(pooled) if pooled else np.zeros((0, 1, 1))
        return cls(list(ids), list(system_ids), pooled, labels)

    def labeled_mask(self) -> np.ndarray:
        return ~np.isnan(self.labels).any(axis=1)

    def subset(self, idx) -> "AesDataset":
        idx = np.asarray(idx, dtype=int)
        return AesDataset(
            [self.ids[i] for i in idx],
            [self.system_ids[i] for i in idx],
            self.pooled[idx],
            self.labels[idx],
            self.pseudo[idx],
        )

    def concat(self, other: "AesDataset") -> "AesDataset":
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        return AesDataset(
            self.ids + other.ids,
            self.system_ids + other.system_ids,
            np.concatenate([self.pooled, other.pooled]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.pseudo, other.pseudo]),
        )

    def require_labels(self, what="dataset"):
        bad = np.where(~self.labeled_mask())[0]
        if bad.size:
            raise DataError(f"{what} item {self.ids[bad[0]]!r} is missing labels")


@dataclass
class TrainConfig:
    batch_size: int = 40
    epochs: int = 10
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    # Rational coefficients multiply powers up to x**5; a full Adam step on
    # them moves outputs far more than the same step on an affine weight.
    activation_lr_scale: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.activation_lr_scale < 0:
            raise ConfigError("activation_lr_scale must be >= 0")


def dev_loss(model: AesPredictor, dev_set: AesDataset) -> float:
    if len(dev_set) == 0:
        raise DataError("dev set is empty")
    dev_set.require_labels("dev")
    raw = predict_raw(model, dev_set.pooled)
    return float(np.mean((raw - dev_set.labels) ** 2))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float


@dataclass
class _AdamW:
    params: list[np.ndarray]
    decay: list[bool]
    lr_scale: list[float]
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v, dec, k in zip(self.params, grads, self.m, self.v, self.decay,
                                      self.lr_scale):
            lr = self.lr * k
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if dec:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(model: AesPredictor, train_set: AesDataset, dev_set: AesDataset, cfg: TrainConfig):
    """Minibatch AdamW on the mean axis MSE; keeps the best-dev epoch.

    The input model is not modified. Returns ``(model, history)``.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    train_set.require_labels("training")
    if len(dev_set) == 0:
        raise DataError("dev set is empty")
    dev_set.require_labels("dev")

    model = copy.deepcopy(model)
    history: list[EpochRecord] = []
    if cfg.epochs == 0:
        return model, history

    scales = [cfg.activation_lr_scale if a else 1.0 for a in model.activation_mask()]
    opt = _AdamW(model.parameters(), model.decay_mask(), scales, cfg.learning_rate,
                 cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_set)
    best, best_loss = None, np.inf
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(model, train_set.pooled[idx], train_set.labels[idx])
            opt.step(grads)
            total += loss * idx.size
        rec = EpochRecord(epoch, total / n, dev_loss(model, dev_set))
        history.append(rec)
        log.debug("epoch %d train %.5f dev %.5f", epoch, rec.train_loss, rec.dev_loss)
        if rec.dev_loss < best_loss:
            best_loss = rec.dev_loss
            best = copy.deepcopy(model)
    return best, history
