"""Report figures: training curves, view comparisons, temperature error maps.

Everything renders off-screen and writes straight to a file.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pseudotex import hsv_to_rgb, hsv_to_tex  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def figsize(width=6.0, height=None):
    return (width, height if height else width * GOLDEN)


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curve(rows, path):
    """Loss terms (log scale) and held-out PSNR against iteration.

    ``rows`` are metrics-log dicts as returned by ``trainer.read_metrics``.
    """
    it = np.array([int(r["iter"]) for r in rows])
    with plt.rc_context(STYLE):
        fig, (ax, bx) = plt.subplots(1, 2, figsize=figsize(8.0, 3.0))
        for key, label in (("loss", "total"), ("loss_h", "hue"), ("loss_s", "sat"), ("loss_v", "value")):
            ax.semilogy(it, [float(r[key]) for r in rows], label=label, lw=1.2 if key == "loss" else 0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss (100-iter mean)")
        ax.legend(frameon=False)
        ph = np.array([float(r["psnr_holdout"]) if r.get("psnr_holdout") else np.nan for r in rows])
        bx.plot(it, ph, color="k", lw=1.0)
        bx.set_xlabel("iteration")
        bx.set_ylabel("held-out PSNR (dB)")
        fig.tight_layout()
    return _finish(fig, path)


def plot_view_comparison(pred, gt, meta, path, gt_T=None, mask=None, title=None):
    """Ground truth | prediction | |dT| side by side (RGB of the HSV images)."""
    panels = 3 if gt_T is not None else 2
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, panels, figsize=(3.0 * panels, 3.2))
        axes[0].imshow(hsv_to_rgb(gt), interpolation="nearest")
        axes[0].set_title("ground truth")
        axes[1].imshow(hsv_to_rgb(pred), interpolation="nearest")
        axes[1].set_title("rendered")
        if gt_T is not None:
            T_hat, _, _ = hsv_to_tex(pred, meta)
            err = np.abs(T_hat - gt_T)
            if mask is not None:
                err = np.where(mask, err, np.nan)
            im = axes[2].imshow(err, cmap="magma", interpolation="nearest")
            axes[2].set_title("|T error| (K)")
            fig.colorbar(im, ax=axes[2], fraction=0.046, pad=0.04)
        for a in axes:
            a.set_xticks([])
            a.set_yticks([])
        if title:
            fig.suptitle(title)
        fig.tight_layout()
    return _finish(fig, path)


def plot_eval_summary(report, path):
    """Per-view PSNR against the best-constant baseline, with MAE on a twin axis."""
    views = [v.view for v in report.views]
    x = np.arange(len(views))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(max(3.0, 0.6 * len(views) + 2.0)))
        ax.bar(x - 0.2, [v.psnr for v in report.views], 0.4, label="rendered", color="0.3")
        ax.bar(x + 0.2, [v.baseline_psnr for v in report.views], 0.4, label="constant image", color="0.75")
        ax.set_xticks(x, [str(v) for v in views])
        ax.set_xlabel("view")
        ax.set_ylabel("PSNR (dB)")
        ax.legend(frameon=False, loc="lower left")
        tx = ax.twinx()
        tx.plot(x, [v.mae_K for v in report.views], "o", color="tab:red")
        tx.set_ylabel("temperature MAE (K)", color="tab:red")
        tx.spines["right"].set_visible(True)
        fig.tight_layout()
    return _finish(fig, path)
