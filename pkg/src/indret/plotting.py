"""Figure rendering for reports: IoU curves, evidence overlays, training curves.

Everything draws on the non-interactive Agg backend and writes PNG files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def iou_curves(curves: dict, path, title: str = "IoU vs. threshold") -> Path:
    """``curves`` maps a run label to ``(thresholds, ious)``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for label, (t, v) in curves.items():
            ax.plot(t, v, marker="o", ms=3, label=label)
        ax.set_xlabel("threshold")
        ax.set_ylabel("IoU")
        ax.set_ylim(0, 1)
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def evidence_overlay(target_px, query_px, heat_target, heat_query, path, score: float | None = None) -> Path:
    """Side-by-side target and query images with their evidence heatmaps."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(5.6, 2.9))
        for ax, px, heat, name in ((axes[0], target_px, heat_target, "target"),
                                   (axes[1], query_px, heat_query, "query")):
            px = np.asarray(px)
            ax.imshow(px if px.ndim == 3 and px.shape[2] == 3 else np.squeeze(px), cmap="gray",
                      vmin=0, vmax=1, interpolation="nearest")
            ax.imshow(heat, cmap="jet", alpha=0.45, vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(name)
            ax.axis("off")
        if score is not None:
            fig.suptitle(f"relevance {score:.4f}")
        fig.tight_layout()
        return _save(fig, path)


def contribution_grid(values, path, title: str = "") -> Path:
    """One contribution map as an annotated cell grid."""
    v = np.asarray(values)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.0))
        im = ax.imshow(v, cmap="viridis", interpolation="nearest")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(title)
        ax.set_xticks(range(v.shape[1]))
        ax.set_yticks(range(v.shape[0]))
        fig.tight_layout()
        return _save(fig, path)


def training_curves(records, path) -> Path:
    """Loss and accuracy per epoch from a list of epoch records."""
    ep = [r.epoch for r in records]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.4, 2.6))
        a1.plot(ep, [r.loss for r in records], label="train")
        a1.plot(ep, [r.val_loss for r in records], label="val")
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a1.legend(frameon=False)
        a2.plot(ep, [r.accuracy for r in records], label="train")
        a2.plot(ep, [r.val_accuracy for r in records], label="val")
        a2.set_xlabel("epoch")
        a2.set_ylabel("accuracy")
        a2.set_ylim(0, 1.05)
        fig.tight_layout()
        return _save(fig, path)


def metric_bars(metrics: dict, path, keys=("mAP", "mAP@5", "mAP@10", "mAP@20")) -> Path:
    keys = [k for k in keys if k in metrics]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.8, 2.6))
        ax.bar(keys, [100.0 * metrics[k] for k in keys], color="0.4")
        ax.set_ylim(0, 100)
        ax.set_ylabel("%")
        fig.tight_layout()
        return _save(fig, path)
