"""Figures for training histories and evaluation reports (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}

CURVES = (
    ("train_loss", "train loss"),
    ("dev_loss", "dev loss"),
    ("dev_corpus_bleu", "dev corpus BLEU"),
    ("dev_mean_reward", "dev mean reward"),
)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date metadata so reruns produce identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def learning_curves(runs: Mapping[str, Sequence[dict]], path: str | Path) -> Path:
    """One panel per tracked quantity, one line per run."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(8, 5.5), sharex=True)
        for ax, (key, title) in zip(axes.flat, CURVES):
            for label, history in runs.items():
                pts = [(r["epoch"], r[key]) for r in history if r.get(key) is not None]
                if pts:
                    xs, ys = zip(*pts)
                    ax.plot(xs, ys, marker="o", markersize=3, label=label)
            ax.set_title(title)
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        for ax in axes[1]:
            ax.set_xlabel("epoch")
        handles, labels = axes.flat[0].get_legend_handles_labels()
        if handles:
            fig.legend(handles, labels, loc="upper center", ncol=min(len(labels), 4))
        fig.tight_layout(rect=(0, 0, 1, 0.94))
        return _save(fig, path)


def class_scores(reports: Mapping[str, dict], metric: str, path: str | Path) -> Path:
    """Grouped bars of a per-question-class metric across reports."""
    classes = []
    for rep in reports.values():
        for name, entry in rep["classes"].items():
            if entry["count"] and name not in classes:
                classes.append(name)
    width = 0.8 / max(len(reports), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(classes) + 2), 3.5))
        for i, (label, rep) in enumerate(reports.items()):
            ys = [rep["classes"].get(c, {}).get(metric) or 0.0 for c in classes]
            ax.bar([j + i * width for j in range(len(classes))], ys, width, label=label)
        ax.set_xticks([j + width * (len(reports) - 1) / 2 for j in range(len(classes))])
        ax.set_xticklabels(classes)
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def rtd_curve(history: Sequence[dict], baseline: float, path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        epochs = [r["epoch"] for r in history]
        ax.plot(epochs, [r["train_loss"] for r in history], marker="o", markersize=3, label="train")
        held = [(r["epoch"], r["heldout_loss"]) for r in history if "heldout_loss" in r]
        if held:
            ax.plot(*zip(*held), marker="s", markersize=3, label="held-out")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.axhline(baseline, color="0.4", linestyle="--", linewidth=1, label="constant-rate baseline")
        ax.set_xlabel("epoch")
        ax.set_ylabel("RTD loss (nats/token)")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
