"""Iterative pseudo-labeling: teacher labels the pool, students compete on dev loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .predictor import (
    AesDataset,
    AesPredictor,
    TrainConfig,
    dev_loss,
    init_predictor,
    predict_pooled,
    train,
)

log = logging.getLogger(__name__)


@dataclass
class IplConfig:
    max_updates: int = 5
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.max_updates < 0:
            raise ConfigError("max_updates must be >= 0")


@dataclass
class IplRecord:
    iteration: int
    student_dev_loss: float
    teacher_dev_loss: float
    accepted: bool


@dataclass
class IplLog:
    records: list[IplRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_accepted(self) -> int:
        return sum(r.accepted for r in self.records)


def pseudo_label(teacher: AesPredictor, unlabeled: AesDataset) -> AesDataset:
    """Label every item with the teacher's clamped predictions."""
    if len(unlabeled) == 0:
        return unlabeled.subset([])
    already = np.where(unlabeled.labeled_mask())[0]
    if already.size:
        raise DataError(f"item {unlabeled.ids[already[0]]!r} is already labeled")
    out = unlabeled.subset(np.arange(len(unlabeled)))
    out.labels = predict_pooled(teacher, unlabeled.pooled)
    out.pseudo = np.ones(len(out), dtype=bool)
    return out


def ipl_run(teacher: AesPredictor, labeled: AesDataset, unlabeled: AesDataset,
            dev: AesDataset, cfg: IplConfig):
    """Run at most ``cfg.max_updates`` teacher/student rounds.

    Each round relabels the pool with the current teacher and trains a
    freshly initialized student (seed ``cfg.seed + iteration``) on labeled
    plus pseudo-labeled data. The student takes over only when its dev loss
    is strictly lower; otherwise the loop stops.
    """
    dev.require_labels("dev")
    overlap = set(dev.ids) & set(unlabeled.ids)
    if overlap:
        raise DataError(f"dev items also in the unlabeled pool: {sorted(overlap)[:5]}")
    arch = teacher.architecture()
    history = IplLog()
    teacher_loss = dev_loss(teacher, dev)
    for it in range(1, cfg.max_updates + 1):
        pseudo = pseudo_label(teacher, unlabeled)
        seed = cfg.seed + it
        student = init_predictor(
            arch["layers"], arch["dim"], arch["hidden"], arch["groups"], arch["order"], seed
        )
        student, _ = train(student, labeled.concat(pseudo), dev, replace(cfg.train_cfg, seed=seed))
        student_loss = dev_loss(student, dev)
        accepted = student_loss < teacher_loss
        history.records.append(IplRecord(it, student_loss, teacher_loss, accepted))
        log.info("ipl round %d: student %.5f teacher %.5f %s", it, student_loss,
                 teacher_loss, "accepted" if accepted else "rejected")
        if not accepted:
            break
        teacher, teacher_loss = student, student_loss
    return teacher, history
