"""Novel-view rendering, image/temperature metrics, and density point clouds."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import io
from .camera import image_rays
from .errors import DimensionMismatchError, ValidationError
from .nerf import RaySampleBatch, deltas_from_t, field_forward, midpoint_samples, render_batch
from .pseudotex import HsvImage, hsv_to_rgb, hsv_to_tex, nearest_material

PSNR_CAP = 99.0


def render_rays(model, origins, directions, near, far, n_samples, chunk=1024):
    """Deterministic rendering (bin midpoints) of arbitrary rays, ``(R, 3)`` HSV and opacity."""
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    hsv = np.empty((origins.shape[0], 3))
    opacity = np.empty(origins.shape[0])
    for start in range(0, origins.shape[0], chunk):
        sl = slice(start, start + chunk)
        r = origins[sl].shape[0]
        t = midpoint_samples(near, far, n_samples, n_rays=r)
        batch = RaySampleBatch(origins[sl], directions[sl], t, deltas_from_t(t, far))
        result, _, _ = render_batch(model, batch)
        hsv[sl] = result.hsv
        opacity[sl] = result.opacity
    return hsv, opacity


def render_view(model, cam, near, far, n_samples=64, chunk=1024):
    o, d = image_rays(cam)
    hsv, _ = render_rays(model, o, d, near, far, n_samples, chunk)
    hsv = np.clip(hsv, 0.0, 1.0).reshape(cam.height, cam.width, 3)
    return HsvImage.from_stack(hsv)


def _as_rgb(img):
    return hsv_to_rgb(img) if isinstance(img, HsvImage) else np.asarray(img, dtype=np.float64)


def psnr(a, b, cap=PSNR_CAP):
    """PSNR in dB for images in [0, 1]; HSV images are compared after RGB conversion.

    Identical images give ``cap``.
    """
    a, b = _as_rgb(a), _as_rgb(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def luma(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ np.array([0.299, 0.587, 0.114])


def _gaussian_window(sigma=1.5, size=11):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def ssim(a, b, sigma=1.5, win=11, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over windows fully inside the image (11x11 Gaussian, sigma 1.5).

    Single-channel arrays are used as-is; HSV images and RGB arrays are
    reduced to luma first.
    """
    if isinstance(a, HsvImage):
        a = luma(hsv_to_rgb(a))
    if isinstance(b, HsvImage):
        b = luma(hsv_to_rgb(b))
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        a, b = luma(a), luma(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < win:
        raise ValidationError(f"image {a.shape} smaller than the {win}x{win} SSIM window")
    k = _gaussian_window(sigma, win)

    def filt(x):
        y = ndimage.correlate1d(x, k, axis=0, mode="reflect")
        return ndimage.correlate1d(y, k, axis=1, mode="reflect")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    pad = (win - 1) // 2
    return float(smap[pad:-pad, pad:-pad].mean())


def unclipped(gt_T, meta):
    return (gt_T >= meta.t_min) & (gt_T <= meta.t_max)


def temperature_mae(pred, gt_T, meta, mask):
    """Mean absolute temperature error over ``mask`` pixels whose truth lies inside the mapped range."""
    gt_T = np.asarray(gt_T, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise ValidationError("temperature MAE needs a nonempty mask")
    T_hat, _, _ = hsv_to_tex(pred, meta)
    sel = mask & unclipped(gt_T, meta) & np.isfinite(gt_T)
    if not np.any(sel):
        raise ValidationError("every masked pixel has clipped saturation")
    return float(np.mean(np.abs(T_hat[sel] - gt_T[sel])))


def clipped_fraction(gt_T, meta, mask):
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        return 0.0
    return float(np.mean(~unclipped(np.asarray(gt_T), meta)[mask]))


def material_accuracy(pred, gt_names, meta, mask):
    """Fraction of masked pixels whose nearest palette hue names the true material."""
    mask = np.asarray(mask, dtype=bool)
    idx = nearest_material(pred.h, meta)
    names = np.array(meta.materials, dtype=object)[idx]
    return float(np.mean(names[mask] == np.asarray(gt_names, dtype=object)[mask]))


def best_constant_psnr(gt):
    """PSNR of the best constant (per-channel mean) RGB image against ``gt``."""
    rgb = _as_rgb(gt)
    const = np.broadcast_to(rgb.reshape(-1, 3).mean(axis=0), rgb.shape)
    return psnr(const, rgb)


@dataclass
class ViewMetrics:
    view: int
    psnr: float
    ssim: float
    mae_K: float
    material_accuracy: float
    baseline_psnr: float
    clipped_fraction: float
    foreground_pixels: int
    psnr_h: float = 0.0
    psnr_s: float = 0.0
    psnr_v: float = 0.0


@dataclass
class EvalReport:
    views: list = field(default_factory=list)

    def mean(self, key):
        vals = [getattr(v, key) for v in self.views]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def summary(self):
        keys = ("psnr", "ssim", "mae_K", "material_accuracy", "baseline_psnr", "clipped_fraction")
        return {k: self.mean(k) for k in keys}

    def to_json(self):
        return {"views": [asdict(v) for v in self.views], "mean": self.summary, "view_ids": [v.view for v in self.views]}

    def save(self, path):
        io.write_json(path, self.to_json())

    def table(self):
        head = f"{'view':>6} {'PSNR dB':>8} {'SSIM':>6} {'MAE K':>7} {'mat acc':>8} {'const dB':>9} {'fg px':>6}"
        rows = [head, "-" * len(head)]
        for v in self.views:
            rows.append(
                f"{v.view:>6} {v.psnr:8.2f} {v.ssim:6.3f} {v.mae_K:7.3f} {v.material_accuracy:8.3f}"
                f" {v.baseline_psnr:9.2f} {v.foreground_pixels:6d}"
            )
        s = self.summary
        rows.append("-" * len(head))
        rows.append(
            f"{'mean':>6} {s['psnr']:8.2f} {s['ssim']:6.3f} {s['mae_K']:7.3f} {s['material_accuracy']:8.3f}"
            f" {s['baseline_psnr']:9.2f}"
        )
        return "\n".join(rows)


def evaluate_views(model, dataset, view_ids, near, far, n_samples=64, renders=None):
    """Render ``view_ids`` of ``dataset`` and score them against its ground truth."""
    report = EvalReport()
    meta = dataset.meta
    for i in view_ids:
        cam = dataset.cameras[i]
        pred = render_view(model, cam, near, far, n_samples)
        if renders is not None:
            renders[i] = pred
        gt = dataset.hsv_image(i)
        gt_T = dataset.temperature(i)
        fg = dataset.foreground(i)
        names = dataset.material_names(i)
        per_channel = [
            psnr(np.repeat(pred.stack()[..., c : c + 1], 3, -1), np.repeat(gt.stack()[..., c : c + 1], 3, -1))
            for c in range(3)
        ]
        report.views.append(
            ViewMetrics(
                view=int(i),
                psnr=psnr(pred, gt),
                ssim=ssim(pred, gt),
                mae_K=temperature_mae(pred, gt_T, meta, fg) if fg.any() else float("nan"),
                material_accuracy=material_accuracy(pred, names, meta, fg) if fg.any() else float("nan"),
                baseline_psnr=best_constant_psnr(gt),
                clipped_fraction=clipped_fraction(gt_T, meta, fg),
                foreground_pixels=int(fg.sum()),
                psnr_h=per_channel[0],
                psnr_s=per_channel[1],
                psnr_v=per_channel[2],
            )
        )
    return report


def density_grid(model, bbox, resolution, chunk=65536):
    """Sigma on a regular grid spanning ``bbox = (lo, hi)``; returns (points, sigma)."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 2):
        raise ValidationError("point-cloud resolution must be >= 2 per axis")
    axes = [np.linspace(lo[k], hi[k], res[k]) for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sigma = np.empty(pts.shape[0])
    down = np.array([[0.0, 0.0, -1.0]])
    for start in range(0, pts.shape[0], chunk):
        sl = slice(start, start + chunk)
        out = field_forward(model, pts[sl], np.repeat(down, pts[sl].shape[0], 0))
        sigma[sl] = out.sigma
    return pts, sigma


def export_point_cloud(model, bbox, resolution, sigma_threshold, path=None, chunk=65536):
    """Grid points with sigma above the threshold, colored by the field's HSV seen from above.

    Returns ``(points, rgb)`` and writes an ASCII PLY when ``path`` is given.
    """
    pts, sigma = density_grid(model, bbox, resolution, chunk)
    keep = pts[sigma > sigma_threshold]
    if keep.shape[0]:
        out = field_forward(model, keep, np.repeat([[0.0, 0.0, -1.0]], keep.shape[0], 0))
        rgb = hsv_to_rgb(np.stack([out.h, out.s, out.v], axis=-1).astype(np.float64))
    else:
        rgb = np.zeros((0, 3))
    if path is not None:
        io.write_ply(path, keep, rgb)
    return keep, rgb


def voxel_diagonal(bbox, resolution):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    return float(np.linalg.norm((hi - lo) / (res - 1)))


def dumps_report(report):
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
