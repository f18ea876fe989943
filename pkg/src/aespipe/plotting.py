"""Figures written next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalmetrics import AXIS_NAMES, LEVELS  # noqa: E402

# PNG metadata would otherwise embed the matplotlib version string.
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_report(report, path, title=None):
    """2x2 grid: MSE and SRCC per axis, utterance and system level."""
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    labels = [*AXIS_NAMES, "overall"]
    x = np.arange(len(labels))
    for row, metric in enumerate(("mse", "srcc")):
        for col, level in enumerate(LEVELS):
            ax = axes[row][col]
            vals = [report.value(level, a, metric) for a in AXIS_NAMES]
            vals.append(report.value(level, "overall", metric))
            ax.bar(x, vals, color=["C0"] * 4 + ["C3"])
            ax.set_xticks(x)
            ax.set_xticklabels(labels)
            ax.set_title(f"{level} {metric.upper()}")
            if metric == "srcc":
                ax.set_ylim(min(0.0, min(vals)), 1.0)
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_history(history, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if history:
        ep = [h.epoch for h in history]
        ax.plot(ep, [h.train_loss for h in history], "o-", label="train")
        ax.plot(ep, [h.dev_loss for h in history], "s-", label="dev")
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean axis MSE")
    ax.set_yscale("log")
    _save(fig, path)


def plot_ipl(log, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    recs = list(log)
    if recs:
        it = [r.iteration for r in recs]
        ax.plot(it, [r.teacher_dev_loss for r in recs], "o--", label="teacher")
        ax.plot(it, [r.student_dev_loss for r in recs], "s-", label="student")
        for r in recs:
            ax.annotate("accepted" if r.accepted else "rejected",
                        (r.iteration, r.student_dev_loss), textcoords="offset points",
                        xytext=(0, 6), ha="center", fontsize=8)
        ax.set_xticks(it)
        ax.legend()
    ax.set_xlabel("round")
    ax.set_ylabel("dev loss")
    _save(fig, path)
