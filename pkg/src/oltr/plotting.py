"""Report figures rendered to files with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
SPLIT_COLORS = {"many": "#3b6ea8", "medium": "#e0a030", "few": "#c04040", "overall": "#555555"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software tag so the bytes only depend on the data
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(rows: list[dict], path, title: str = "") -> Path:
    """Loss and per-split accuracy against epoch."""
    epochs = [int(r["epoch"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        ax_loss.plot(epochs, [float(r["loss"]) for r in rows], "k.-")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss per sample")
        for split in ("many", "medium", "few"):
            ax_acc.plot(epochs, [float(r[f"{split}_acc"]) for r in rows], ".-", color=SPLIT_COLORS[split],
                        label=split)
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("accuracy")
        ax_acc.set_ylim(0, 1.02)
        ax_acc.legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_split_accuracy(reports: dict, path) -> Path:
    """Grouped bars of many/medium/few/overall accuracy, one group per run."""
    names = list(reports)
    splits = ("many", "medium", "few", "overall")
    x = np.arange(len(splits))
    width = 0.8 / max(1, len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(splits) + 0.4 * len(names)), 2.8))
        for i, name in enumerate(names):
            vals = [float(reports[name][s]) for s in splits]
            ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(splits)
        ax.set_ylabel("open-set accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False, ncol=2)
        fig.tight_layout()
        return _save(fig, path)


def plot_loop(rows: list[dict], path, title: str = "") -> Path:
    """Known/unknown accuracy and classifier width per exploration stage."""
    stages = [int(r["stage"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        ax.plot(stages, [float(r["known_acc"]) for r in rows], "o-", color=SPLIT_COLORS["many"], label="known")
        ax.plot(stages, [float(r["unknown_acc"]) for r in rows], "s-", color=SPLIT_COLORS["few"], label="unknown")
        ax.set_xlabel("stage")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1.02)
        ax.set_xticks(stages)
        for s, r in zip(stages, rows):
            ax.annotate(str(r["classifier_width"]), (s, 0.03), ha="center", fontsize=7, color="0.4")
        ax.legend(frameon=False, loc="best")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
