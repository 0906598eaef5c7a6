"""Figures written next to the delimited reports (Agg backend, PNG files)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluator import RECALL_ENVELOPE, ConfusionMatrix, QAStats, RecallReport  # noqa: E402


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no timestamp metadata so reruns produce identical files
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_recall(report: RecallReport, path: Path) -> Path:
    nodes = list(report.per_node)
    values = [report.per_node[n].recall for n in nodes]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(nodes) + 2), 4))
    ax.bar(range(len(nodes)), values, color="#4c72b0")
    lo, hi = RECALL_ENVELOPE
    ax.axhspan(lo, hi, color="#dddddd", alpha=0.5, zorder=0, label="reference range")
    ax.axhline(report.overall, color="#c44e52", linestyle="--", label=f"overall {report.overall:.2f}")
    ax.set_xticks(range(len(nodes)), nodes, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("recall")
    ax.legend(loc="upper right", fontsize="small")
    return _save(fig, path)


def plot_confusion(matrix: ConfusionMatrix, path: Path) -> Path:
    n = len(matrix.labels)
    counts = np.array(matrix.counts, dtype=float).reshape(n, n)
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * n + 2), max(3.5, 0.5 * n + 1.5)))
    if not n:
        ax.axis("off")
        ax.text(0.5, 0.5, "no labels pass the frequency filter", ha="center", va="center")
        ax.set_title(f"{matrix.event_class.value} behaviors (0 sentences)")
        return _save(fig, path)
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(n), matrix.labels, rotation=60, ha="right")
    ax.set_yticks(range(n), matrix.labels)
    ax.set_xlabel("system")
    ax.set_ylabel("gold")
    for i in range(n):
        for j in range(n):
            if counts[i, j]:
                ax.text(j, i, int(counts[i, j]), ha="center", va="center", fontsize="small")
    ax.set_title(f"{matrix.event_class.value} behaviors ({matrix.eligible} sentences)")
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_qa(stats: QAStats, path: Path) -> Path:
    nodes = list(stats.per_node)
    rates = [stats.per_node[n].rate for n in nodes]
    colors = ["#c44e52" if stats.per_node[n].flagged else "#55a868" for n in nodes]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(nodes) + 2), 4))
    ax.bar(range(len(nodes)), rates, color=colors)
    ax.axhline(stats.threshold, color="black", linestyle=":", label=f"threshold {stats.threshold:.2f}")
    ax.set_xticks(range(len(nodes)), nodes, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("QA acceptance")
    ax.legend(loc="lower right", fontsize="small")
    return _save(fig, path)
