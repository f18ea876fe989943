"""Seeded synthetic corpus for end-to-end runs.

Clips get a latent vector ``c = system_bias + noise``; layer ``l`` frames are
``alpha_l * c`` plus frame noise whose scale varies per clip. Labels are
smooth functions of the stored (float32-rounded) embedding statistics,
squashed into [1, 10]: a layer-mixed time mean, which pooled heads can see,
and the frame dispersion, which they cannot. Metric columns are noisy
monotone transforms of the labels plus distractors.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import ManifestRecord, write_features, write_manifest, write_metric_table
from .errors import ConfigError
from .gbtfuse import N_METRIC_FEATURES
from .predictor import AXES, AesScores, EmbeddingTensor

METADATA_NAME = "metadata.txt"
MANIFEST_NAME = "manifest.jsonl"
METRICS_NAME = "metrics.csv"

SYSTEM_BIAS_SCALE = 0.7
FRAME_NOISE = 1.0
SHARPNESS = 0.8
MISSING_RATE = 0.02
NOISE_SPREAD = 0.5
LIN_NOISE = 1.5
LOG_NOISE = 0.3
EXP_NOISE = 1.5
MIX_NOISE = 1.0
DISPERSION_WEIGHT = 3.0


@dataclass
class Generator:
    """Parameters of the labeling function, drawn once from the seed."""

    layer_scale: np.ndarray  # alpha_l
    layer_mix: np.ndarray  # beta_l, sums to 1
    direction: np.ndarray  # (4, D) unit rows
    curvature: np.ndarray  # (4, D) unit rows
    dispersion_weight: np.ndarray  # (4,)

    @classmethod
    def draw(cls, rng, L, D) -> "Generator":
        u = rng.standard_normal((len(AXES), D))
        v = rng.standard_normal((len(AXES), D))
        mix = np.exp(np.linspace(0.0, 1.0, L))
        return cls(
            np.linspace(0.5, 1.5, L),
            mix / mix.sum(),
            u / np.linalg.norm(u, axis=1, keepdims=True),
            v / np.linalg.norm(v, axis=1, keepdims=True),
            rng.uniform(-DISPERSION_WEIGHT, DISPERSION_WEIGHT, len(AXES)),
        )

    def statistic(self, emb: EmbeddingTensor) -> np.ndarray:
        return self.layer_mix @ emb.time_pool()

    @staticmethod
    def dispersion(emb: EmbeddingTensor) -> float:
        return float(np.log(emb.data.std(axis=1).mean()))

    def labels(self, emb: EmbeddingTensor) -> np.ndarray:
        mu = self.statistic(emb)
        s = (self.direction @ mu + 0.5 * np.tanh(self.curvature @ mu)
             + self.dispersion_weight * self.dispersion(emb))
        return 1.0 + 9.0 / (1.0 + np.exp(-SHARPNESS * s))


def metric_names() -> list[str]:
    names = []
    for a in AXES:
        names += [f"{a}_lin", f"{a}_log", f"{a}_exp"]
    names += [f"mix_{i}" for i in range(4)]
    names += [f"noise_{i}" for i in range(N_METRIC_FEATURES - len(names))]
    return names


def metric_row(rng, labels) -> np.ndarray:
    row = []
    for y in labels:
        row += [
            y + rng.normal(0.0, LIN_NOISE),
            np.log(y) + rng.normal(0.0, LOG_NOISE),
            np.exp(y / 4.0) + rng.normal(0.0, EXP_NOISE),
        ]
    mean = labels.mean()
    row += [mean + rng.normal(0.0, MIX_NOISE) for _ in range(4)]
    row += list(rng.standard_normal(N_METRIC_FEATURES - len(row)))
    row = np.array(row)
    row[rng.random(row.size) < MISSING_RATE] = np.nan
    return row


def gen_synthetic(n_train, n_dev, n_eval, n_systems, L, T, D, seed, out_dir, n_unlabeled=None):
    """Write a manifest, feature files, a metric table and metadata under ``out_dir``.

    ``n_unlabeled`` extra train-split clips carry no labels (defaults to
    ``n_train``). Returns the manifest path.
    """
    n_unlabeled = n_train if n_unlabeled is None else n_unlabeled
    for name, v in [("n_train", n_train), ("n_dev", n_dev), ("n_eval", n_eval),
                    ("n_systems", n_systems), ("L", L), ("T", T), ("D", D)]:
        if v < 1:
            raise ConfigError(f"{name} must be >= 1")
    if n_unlabeled < 0:
        raise ConfigError("n_unlabeled must be >= 0")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    gen = Generator.draw(rng, L, D)
    bias = rng.normal(0.0, SYSTEM_BIAS_SCALE, (n_systems, D))

    plan = (
        [("train", True)] * n_train
        + [("train", False)] * n_unlabeled
        + [("dev", True)] * n_dev
        + [("eval", True)] * n_eval
    )
    records, metrics = [], {}
    for i, (split, labeled) in enumerate(plan):
        utt = f"utt{i:05d}"
        sys_idx = i % n_systems
        c = bias[sys_idx] + rng.standard_normal(D)
        scale = FRAME_NOISE * np.exp(NOISE_SPREAD * rng.standard_normal())
        frames = gen.layer_scale[:, None, None] * c + scale * rng.standard_normal((L, T, D))
        emb = EmbeddingTensor(frames.astype("<f4").astype(np.float64))
        y = gen.labels(emb)
        rel = f"features/{utt}.aesf"
        write_features(emb, out / rel)
        metrics[utt] = metric_row(rng, y)
        records.append(ManifestRecord(
            utt_id=utt, system_id=f"sys{sys_idx:02d}", split=split,
            feature_path=rel, metrics_path=METRICS_NAME,
            labels=AesScores.from_array(y) if labeled else None,
        ))
    write_manifest(records, out / MANIFEST_NAME)
    write_metric_table(metric_names(), metrics, out / METRICS_NAME)
    (out / METADATA_NAME).write_text(_metadata(gen, seed, n_train, n_unlabeled, n_dev, n_eval,
                                               n_systems, L, T, D), encoding="utf-8")
    return out / MANIFEST_NAME


def _metadata(gen, seed, n_train, n_unlabeled, n_dev, n_eval, n_systems, L, T, D) -> str:
    def vec(a):
        return "[" + ", ".join(repr(float(x)) for x in np.ravel(a)) + "]"

    lines = [
        f"seed={seed}",
        f"n_train={n_train}",
        f"n_unlabeled={n_unlabeled}",
        f"n_dev={n_dev}",
        f"n_eval={n_eval}",
        f"n_systems={n_systems}",
        f"L={L}",
        f"T={T}",
        f"D={D}",
        "embedding: frames[l, t] = alpha[l] * c + s * N(0, I); "
        f"s = {FRAME_NOISE} * exp({NOISE_SPREAD} * N(0, 1)); "
        f"c = system_bias + N(0, I), system_bias ~ N(0, {SYSTEM_BIAS_SCALE}^2 I)",
        "statistics: mu = sum_l beta[l] * mean_t frames[l, t]; "
        "disp = log(mean over (l, d) of std_t frames[l, t, d])",
        f"label[axis] = 1 + 9 * sigmoid({SHARPNESS} * (u[axis] . mu + 0.5 * tanh(v[axis] . mu)"
        " + w[axis] * disp))",
        f"metrics: per axis y + N(0, {LIN_NOISE}^2), log(y) + N(0, {LOG_NOISE}^2), "
        f"exp(y/4) + N(0, {EXP_NOISE}^2); 4 columns of mean(y) + N(0, {MIX_NOISE}^2); "
        f"the rest N(0, 1); cells missing with p={MISSING_RATE}",
        f"alpha={vec(gen.layer_scale)}",
        f"beta={vec(gen.layer_mix)}",
        f"w={vec(gen.dispersion_weight)}",
    ]
    for a, axis in enumerate(AXES):
        lines.append(f"u[{axis}]={vec(gen.direction[a])}")
        lines.append(f"v[{axis}]={vec(gen.curvature[a])}")
    return "\n".join(lines) + "\n"
