"""Report figures. Everything renders off-screen to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRICS  # noqa: E402

REGION_ORDER = ("ET", "WT", "TC")
REGION_COLORS = {"WT": "#4c72b0", "TC": "#dd8452", "ET": "#c44e52", "NCR": "#8172b2", "ED": "#55a868"}

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date tags, keeps PNG bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(reports: dict, path) -> Path:
    """Train (solid) and validation (dashed) loss per epoch for each cascade stage."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        for region, rep in reports.items():
            color = REGION_COLORS.get(region, "k")
            epochs = np.arange(1, len(rep["train_loss"]) + 1)
            ax.plot(epochs, rep["train_loss"], color=color, label=f"{region} train")
            ax.plot(epochs, rep["val_loss"], color=color, ls="--", label=f"{region} val")
            if rep.get("initial_val_loss") is not None:
                ax.plot([0], [rep["initial_val_loss"]], marker="o", color=color, ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(ncol=2, frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_metric_distributions(cases: list, path, title: str = "") -> Path:
    """One panel per metric, box plot per evaluation region."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(METRICS), figsize=(8, 2.8))
        keys = {"DSC": "dice", "Sensitivity": "sensitivity", "Hausdorff95": "hausdorff95"}
        for ax, metric in zip(axes, METRICS):
            data = []
            for region in REGION_ORDER:
                vals = [c[keys[metric]][region] for c in cases]
                data.append([v for v in vals if v is not None])
            positions = np.arange(1, len(REGION_ORDER) + 1)
            for pos, vals, region in zip(positions, data, REGION_ORDER):
                if vals:
                    ax.boxplot([vals], positions=[pos], widths=0.55,
                               medianprops={"color": REGION_COLORS[region]})
            ax.set_xticks(positions, REGION_ORDER)
            ax.set_title(metric)
            if metric != "Hausdorff95":
                ax.set_ylim(-0.05, 1.05)
            else:
                ax.set_ylabel("mm")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_survival(pred_days, true_days, thresholds, path) -> Path:
    """Predicted vs. true survival with the class boundaries drawn on both axes."""
    pred = np.asarray(pred_days, dtype=float)
    true = np.asarray(true_days, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        hi = max(pred.max(initial=1), true.max(initial=1)) * 1.08
        for t in thresholds:
            ax.axvline(t, color="0.8", lw=0.8)
            ax.axhline(t, color="0.8", lw=0.8)
        ax.plot([0, hi], [0, hi], color="0.5", lw=0.8, ls=":")
        ax.scatter(true, pred, s=14, color=REGION_COLORS["WT"])
        ax.set_xlim(0, hi)
        ax.set_ylim(0, hi)
        ax.set_xlabel("true survival (days)")
        ax.set_ylabel("predicted survival (days)")
        fig.tight_layout()
        return _save(fig, path)
