"""Report figures written to PNG files (headless matplotlib)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402


def roc_curve(scores, labels):
    """False/true positive rates at every distinct threshold, ties merged."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    tpr = np.r_[0.0, tp / max(1, y.sum())]
    fpr = np.r_[0.0, fp / max(1, (~y).sum())]
    return fpr, tpr


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_roc(scores, labels, path, title="Attribute ROC (pooled)", auc=None):
    fpr, tpr = roc_curve(scores, labels)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    label = "pooled" if auc is None else f"pooled, AUC = {auc:.3f}"
    ax.plot(fpr, tpr, lw=1.8, label=label)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set(xlim=(0, 1), ylim=(0, 1.01), xlabel="false positive rate",
           ylabel="true positive rate", title=title)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_attribute_auc(names: Sequence[str], aucs: Sequence, path):
    vals = [np.nan if a is None else a for a in aucs]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(names) + 1.5), 3.5))
    ax.bar(range(len(names)), vals, color="tab:blue")
    ax.axhline(0.5, ls="--", lw=0.8, color="grey")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=8)
    ax.set(ylim=(0, 1), ylabel="AUC", title="Per-attribute AUC")
    return _save(fig, path)


def plot_training(records: Sequence[dict], path):
    """Loss components and validation metrics per epoch from RunLog records."""
    epochs = [r["epoch"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("total", "class_loss", "box_loss", "attr_loss"):
        ax1.plot(epochs, [r["train"][key] for r in records], marker=".", label=key)
    ax1.set(xlabel="epoch", ylabel="mean training loss", yscale="log")
    ax1.legend(fontsize=8)
    auc = [np.nan if r["val_micro_auc"] is None else r["val_micro_auc"] for r in records]
    ax2.plot(epochs, auc, marker=".", label="val micro AUC")
    ax2.plot(epochs, [r["val_recall"] for r in records], marker=".", label="val recall@0.5")
    best = [r["epoch"] for r in records if r["is_best"]]
    if best:
        ax2.axvline(best[-1], ls=":", color="grey", label="best")
    ax2.set(xlabel="epoch", ylim=(0, 1))
    ax2.legend(fontsize=8)
    for ax in (ax1, ax2):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    fig.tight_layout()
    return _save(fig, path)
