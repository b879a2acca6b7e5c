"""Pseudo-TeX: map (temperature, material, texture) to HSV and back.

Material -> hue (fixed palette), temperature -> saturation, texture -> value.
The normalization ranges travel with every image in a JSON sidecar so the
mapping can be inverted for temperature evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib import colors as mcolors

from .errors import MissingMaterialError, ValidationError
from .texdecomp import MaterialMask


def build_palette(materials):
    """Evenly spaced hues ``i / M`` over the lexicographically sorted ids."""
    materials = list(materials)
    if not materials:
        raise ValidationError("palette needs at least one material")
    if len(set(materials)) != len(materials):
        dupes = sorted({m for m in materials if materials.count(m) > 1})
        raise ValidationError(f"duplicate material ids: {dupes}")
    ordered = sorted(materials)
    M = len(ordered)
    return {m: i / M for i, m in enumerate(ordered)}


@dataclass
class MappingMetadata:
    t_min: float
    t_max: float
    x_min: float
    x_max: float
    palette: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValidationError(f"t_min ({self.t_min}) must be < t_max ({self.t_max})")
        if not self.x_min < self.x_max:
            raise ValidationError(f"x_min ({self.x_min}) must be < x_max ({self.x_max})")
        hues = list(self.palette.values())
        if len(set(hues)) != len(hues):
            raise ValidationError("palette hues must be pairwise distinct")
        if any(not 0.0 <= h < 1.0 for h in hues):
            raise ValidationError("palette hues must lie in [0, 1)")

    @property
    def materials(self):
        """Palette materials in hue order."""
        return sorted(self.palette, key=self.palette.get)

    def to_json(self):
        return {
            "t_min_K": self.t_min,
            "t_max_K": self.t_max,
            "x_min": self.x_min,
            "x_max": self.x_max,
            "palette": {m: self.palette[m] for m in sorted(self.palette)},
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            t_min=float(obj["t_min_K"]),
            t_max=float(obj["t_max_K"]),
            x_min=float(obj["x_min"]),
            x_max=float(obj["x_max"]),
            palette={str(k): float(v) for k, v in obj["palette"].items()},
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class HsvImage:
    h: np.ndarray
    s: np.ndarray
    v: np.ndarray
    invalid: np.ndarray | None = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if not (self.h.shape == self.s.shape == self.v.shape) or self.h.ndim != 2:
            raise ValidationError("h, s, v must be 2-D arrays of equal shape")
        for name in ("h", "s", "v"):
            c = getattr(self, name)
            if np.any(c < 0.0) or np.any(c > 1.0):
                raise ValidationError(f"channel {name} outside [0, 1]")

    @property
    def height(self):
        return self.h.shape[0]

    @property
    def width(self):
        return self.h.shape[1]

    def stack(self):
        return np.stack([self.h, self.s, self.v], axis=-1)

    @classmethod
    def from_stack(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[..., 0], arr[..., 1], arr[..., 2])


def _range_from(values, percentiles, margin):
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return 0.0, 1.0
    lo, hi = np.percentile(finite, percentiles) if percentiles else (finite.min(), finite.max())
    lo, hi = float(lo), float(hi)
    pad = margin * (hi - lo)
    if hi - lo <= 0:
        pad = max(0.5 * abs(lo), 1e-12)
    return lo - pad, hi + pad


def metadata_for(T, X, palette, percentiles=(2.0, 98.0), t_range=None, x_range=None, margin=0.0):
    """Mapping ranges for a T/X map pair: explicit ranges win, else percentiles.

    A degenerate (flat) range is widened symmetrically so the mapping stays
    invertible.
    """
    t_lo, t_hi = t_range if t_range is not None else _range_from(np.asarray(T, float), percentiles, margin)
    x_lo, x_hi = x_range if x_range is not None else _range_from(np.asarray(X, float), percentiles, margin)
    return MappingMetadata(t_lo, t_hi, x_lo, x_hi, dict(palette))


def tex_to_hsv(tex, meta):
    """Map a :class:`TeXImage` to HSV; NaN temperatures map to s = 0 and are flagged."""
    names = tex.material.material_names()
    unknown = sorted(set(tex.material.legend[i] for i in np.unique(tex.material.labels)) - set(meta.palette))
    if unknown:
        raise MissingMaterialError(f"materials missing from the palette: {unknown}")
    h = np.zeros(names.shape)
    for name, hue in meta.palette.items():
        h[names == name] = hue
    T = np.asarray(tex.T, dtype=np.float64)
    X = np.asarray(tex.X, dtype=np.float64)
    invalid = ~np.isfinite(T)
    with np.errstate(invalid="ignore"):
        s = np.clip((T - meta.t_min) / (meta.t_max - meta.t_min), 0.0, 1.0)
        v = np.clip((X - meta.x_min) / (meta.x_max - meta.x_min), 0.0, 1.0)
    s = np.where(invalid, 0.0, s)
    v = np.where(np.isfinite(v), v, 0.0)
    return HsvImage(h, s, v, invalid=invalid)


def cyclic_distance(a, b):
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 1.0
    return np.minimum(d, 1.0 - d)


def nearest_material(h, meta):
    """Index (in hue order) of the nearest palette hue under cyclic distance."""
    hues = np.array([meta.palette[m] for m in meta.materials])
    dist = cyclic_distance(np.asarray(h, dtype=np.float64)[..., None], hues)
    return np.argmin(dist, axis=-1)


def hsv_to_tex(img, meta):
    """Inverse mapping: returns ``(T, MaterialMask, X)``."""
    T = meta.t_min + img.s * (meta.t_max - meta.t_min)
    X = meta.x_min + img.v * (meta.x_max - meta.x_min)
    idx = nearest_material(img.h, meta)
    mask = MaterialMask(idx, dict(enumerate(meta.materials)))
    return T, mask, X


def hsv_to_rgb(img):
    """Hexcone HSV -> RGB; accepts an :class:`HsvImage` or a ``(..., 3)`` array."""
    arr = img.stack() if isinstance(img, HsvImage) else np.asarray(img, dtype=np.float64)
    arr = np.clip(arr, 0.0, 1.0)
    return mcolors.hsv_to_rgb(arr)


def rgb_to_hsv(rgb):
    return mcolors.rgb_to_hsv(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0))
