"""Synthetic thermal scenes: analytic primitives, multi-band ray tracing, dataset export.

Each hit pixel radiates ``e(nu) B(nu, T_obj) + (1 - e(nu)) B(nu, T_ambient)``,
i.e. one ambient reflection with unit illumination factor. The traced
ground truth (temperature, material, texture, depth) is the oracle that
the decomposition and rendering stages are checked against.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .camera import image_rays
from .errors import MissingMaterialError, ValidationError
from .pseudotex import MappingMetadata, build_palette, hsv_to_rgb, tex_to_hsv
from .radiometry import WavenumberGrid, band_radiance, load_spectral_library, planck_radiance, write_spectral_library
from .texdecomp import MaterialMask, TeXImage, ThermalCube

log = logging.getLogger(__name__)

SHAPES = ("sphere", "box", "plane")
_EPS = 1e-9


@dataclass
class Primitive:
    shape: str
    center: np.ndarray
    temperature: float
    material: str
    size: object = 1.0  # sphere radius, or box edge lengths (3,)
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValidationError(f"unknown primitive shape {self.shape!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.normal = self.normal / np.linalg.norm(self.normal)
        if self.temperature <= 0:
            raise ValidationError("primitive temperature must be > 0")
        if self.shape == "box":
            self.size = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,)).copy()
        else:
            self.size = float(np.asarray(self.size).ravel()[0])
        if np.any(np.asarray(self.size) <= 0):
            raise ValidationError("primitive size must be > 0")

    def intersect(self, o, d):
        """Nearest positive hit distance per ray; inf on miss."""
        if self.shape == "sphere":
            oc = o - self.center
            b = np.sum(oc * d, axis=-1)
            c = np.sum(oc * oc, axis=-1) - self.size**2
            disc = b * b - c
            root = np.sqrt(np.maximum(disc, 0.0))
            t0, t1 = -b - root, -b + root
            t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
            return np.where(disc >= 0, t, np.inf)
        if self.shape == "box":
            half = 0.5 * self.size
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                ta = (self.center - half - o) * inv
                tb = (self.center + half - o) * inv
            t_near = np.max(np.minimum(ta, tb), axis=-1)
            t_far = np.min(np.maximum(ta, tb), axis=-1)
            t = np.where(t_near > _EPS, t_near, t_far)
            return np.where((t_far >= t_near) & (t > _EPS), t, np.inf)
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ self.normal) / denom
        return np.where((np.abs(denom) > 1e-12) & (t > _EPS), t, np.inf)

    def distance(self, p):
        """Unsigned distance from points ``p`` (N, 3) to the primitive surface."""
        if self.shape == "sphere":
            return np.abs(np.linalg.norm(p - self.center, axis=-1) - self.size)
        if self.shape == "box":
            q = np.abs(p - self.center) - 0.5 * self.size
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            return np.abs(outside + inside)
        return np.abs((p - self.center) @ self.normal)

    def to_json(self):
        out = {
            "shape": self.shape,
            "center": self.center.tolist(),
            "temperature": self.temperature,
            "material": self.material,
        }
        if self.shape == "plane":
            out["normal"] = self.normal.tolist()
        else:
            out["size"] = self.size.tolist() if self.shape == "box" else self.size
        return out


@dataclass
class SceneDescription:
    primitives: list
    ambient_temperature: float
    background_material: str
    background_temperature: float
    band: WavenumberGrid

    def __post_init__(self):
        if not self.primitives:
            raise ValidationError("scene needs at least one primitive")
        if self.ambient_temperature <= 0 or self.background_temperature <= 0:
            raise ValidationError("scene temperatures must be > 0")

    @property
    def materials(self):
        return sorted({p.material for p in self.primitives} | {self.background_material})

    @property
    def temperatures(self):
        return [p.temperature for p in self.primitives] + [self.background_temperature]

    def check_library(self, library):
        missing = [m for m in self.materials if m not in library]
        if missing:
            raise MissingMaterialError(f"scene materials not in the spectral library: {missing}")

    @classmethod
    def from_json(cls, obj):
        band = obj["band"]
        return cls(
            primitives=[
                Primitive(
                    shape=p["shape"],
                    center=p["center"],
                    temperature=float(p["temperature"]),
                    material=p["material"],
                    size=p.get("size", 1.0),
                    normal=p.get("normal", [0.0, 0.0, 1.0]),
                )
                for p in obj["primitives"]
            ],
            ambient_temperature=float(obj["ambient_temperature"]),
            background_material=obj["background"]["material"],
            background_temperature=float(obj["background"]["temperature"]),
            band=WavenumberGrid.uniform(band["lo_cm1"] * 100.0, band["hi_cm1"] * 100.0, band["count"]),
        )

    def to_json(self):
        nu = self.band.cm1
        return {
            "primitives": [p.to_json() for p in self.primitives],
            "ambient_temperature": self.ambient_temperature,
            "background": {"material": self.background_material, "temperature": self.background_temperature},
            "band": {"lo_cm1": float(nu[0]), "hi_cm1": float(nu[-1]), "count": len(self.band)},
        }

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def builtin_path(name):
    return resources.files("texnerf") / "data" / name


def reference_scene():
    return SceneDescription.load(builtin_path("ref_scene.json"))


def reference_library():
    return load_spectral_library(builtin_path("library.csv"))


@dataclass
class TraceResult:
    cube: ThermalCube
    tex: TeXImage
    depth: np.ndarray  # (H, W); +inf on miss
    primitive: np.ndarray  # (H, W) hit primitive index; -1 on miss
    foreground: np.ndarray  # (H, W) bool, pixels hitting a bounded (non-plane) primitive

    def __iter__(self):
        return iter((self.cube, self.tex, self.depth))


def raytrace_thermal(scene, cam, library):
    """Trace one view: radiance cube, ground-truth TeX, depth and hit ids."""
    scene.check_library(library)
    nu = scene.band.values
    o, d = image_rays(cam)
    hits = np.stack([p.intersect(o, d) for p in scene.primitives], axis=0)
    nearest = np.argmin(hits, axis=0)
    depth = hits[nearest, np.arange(hits.shape[1])]
    hit = np.isfinite(depth)
    prim_idx = np.where(hit, nearest, -1)

    legend = dict(enumerate(scene.materials))
    index_of = {m: i for i, m in legend.items()}
    n_pix = o.shape[0]
    labels = np.full(n_pix, index_of[scene.background_material])
    T = np.full(n_pix, scene.background_temperature)
    for i, p in enumerate(scene.primitives):
        sel = prim_idx == i
        labels[sel] = index_of[p.material]
        T[sel] = p.temperature

    ambient = planck_radiance(nu, scene.ambient_temperature)
    radiance = np.empty((n_pix, len(nu)))
    for idx, name in legend.items():
        sel = labels == idx
        if not np.any(sel):
            continue
        e = library[name].at(nu)
        radiance[sel] = e * planck_radiance(nu, T[sel, None]) + (1.0 - e) * ambient

    H, W = cam.height, cam.width
    x_amb = band_radiance(scene.ambient_temperature, scene.band)
    mask = MaterialMask(labels.reshape(H, W), legend)
    tex = TeXImage(T=T.reshape(H, W), material=mask, X=np.full((H, W), x_amb), v0=np.ones((H, W)))
    bounded = np.array([p.shape != "plane" for p in scene.primitives] + [False])
    foreground = bounded[prim_idx]
    return TraceResult(
        cube=ThermalCube(scene.band, radiance.reshape(H, W, len(nu))),
        tex=tex,
        depth=depth.reshape(H, W),
        primitive=prim_idx.reshape(H, W),
        foreground=foreground.reshape(H, W),
    )


def scene_metadata(scene, library, t_margin=5.0):
    """Mapping ranges fixed by the scene's ground truth, shared by every view."""
    temps = scene.temperatures
    x_amb = float(band_radiance(scene.ambient_temperature, scene.band))
    return MappingMetadata(
        t_min=min(temps) - t_margin,
        t_max=max(temps) + t_margin,
        x_min=0.5 * x_amb,
        x_max=1.5 * x_amb,
        palette=build_palette(scene.materials),
    )


def emit_dataset(scene, poses, out_dir, library, noise_sigma=0.0, seed=0, t_margin=5.0):
    """Write a full synthetic dataset for ``poses`` under ``out_dir``.

    Layout::

        transforms.json  dataset.json  scene.json  library.csv
        cubes/r_XXX.json + r_XXX_bKK.pfm    radiance per band
        tex/r_XXX_T.pfm, r_XXX_X.pfm       ground-truth temperature / texture
        masks/r_XXX.pgm (+ .legend.json)   material labels
        masks/r_XXX_fg.pgm                 bounded-object foreground
        hsv/r_XXX.pfm (+ .meta.json, .png) Pseudo-TeX image
        depth/r_XXX.pfm                    hit distance, +inf on miss

    Noise is additive Gaussian on the radiance, drawn view by view from one
    seeded generator.
    """
    out = Path(out_dir)
    for sub in ("cubes", "tex", "masks", "hsv", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    scene.check_library(library)
    meta = scene_metadata(scene, library, t_margin)
    rng = np.random.default_rng(seed)
    frames = []
    depth_min, depth_max = np.inf, 0.0
    for i, cam in enumerate(poses):
        name = f"r_{i:03d}"
        result = raytrace_thermal(scene, cam, library)
        cube = result.cube
        if noise_sigma > 0:
            noisy = cube.radiance + rng.normal(0.0, noise_sigma, cube.radiance.shape)
            cube = ThermalCube(cube.grid, np.maximum(noisy, 0.0))
        io.write_cube(out / "cubes" / f"{name}.json", cube)
        io.write_pfm(out / "tex" / f"{name}_T.pfm", result.tex.T)
        io.write_pfm(out / "tex" / f"{name}_X.pfm", result.tex.X)
        io.write_mask(out / "masks" / f"{name}.pgm", result.tex.material)
        io.write_pgm(out / "masks" / f"{name}_fg.pgm", (result.foreground * 255).astype(np.uint8), maxval=255)
        hsv = tex_to_hsv(result.tex, meta)
        io.write_pfm(out / "hsv" / f"{name}.pfm", hsv.stack())
        meta.save(out / "hsv" / f"{name}.meta.json")
        io.save_png(out / "hsv" / f"{name}.png", hsv_to_rgb(hsv))
        io.write_pfm(out / "depth" / f"{name}.pfm", result.depth)
        finite = result.depth[np.isfinite(result.depth)]
        if finite.size:
            depth_min = min(depth_min, float(finite.min()))
            depth_max = max(depth_max, float(finite.max()))
        frames.append(
            {
                "file_path": f"hsv/{name}.pfm",
                "transform_matrix": cam.c2w.tolist(),
                "cube": f"cubes/{name}.json",
                "temperature": f"tex/{name}_T.pfm",
                "texture": f"tex/{name}_X.pfm",
                "mask": f"masks/{name}.pgm",
                "foreground": f"masks/{name}_fg.pgm",
                "depth": f"depth/{name}.pfm",
            }
        )
    cam0 = poses[0]
    io.write_json(out / "transforms.json", {"camera_angle_x": cam0.camera_angle_x, "frames": frames})
    near = 0.9 * depth_min if np.isfinite(depth_min) else 0.1
    far = 1.1 * depth_max if depth_max > 0 else 10.0
    io.write_json(
        out / "dataset.json",
        {
            "width": cam0.width,
            "height": cam0.height,
            "views": len(poses),
            "seed": seed,
            "noise_sigma": noise_sigma,
            "near": near,
            "far": far,
            "mapping": "hsv/mapping.meta.json",
            "scene": "scene.json",
            "library": "library.csv",
        },
    )
    meta.save(out / "hsv" / "mapping.meta.json")
    io.write_json(out / "scene.json", scene.to_json())
    write_spectral_library(library, out / "library.csv")
    log.info("wrote %d views to %s", len(poses), out)
    return out


def scene_bbox(scene, margin=0.1):
    """Axis-aligned bounds of the bounded primitives, extended down/up to any planes they rest on."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for p in scene.primitives:
        if p.shape == "sphere":
            lo = np.minimum(lo, p.center - p.size)
            hi = np.maximum(hi, p.center + p.size)
        elif p.shape == "box":
            lo = np.minimum(lo, p.center - 0.5 * p.size)
            hi = np.maximum(hi, p.center + 0.5 * p.size)
    for p in scene.primitives:
        if p.shape == "plane" and np.allclose(np.abs(p.normal), [0, 0, 1]):
            lo[2] = min(lo[2], p.center[2])
            hi[2] = max(hi[2], p.center[2])
    return lo - margin, hi + margin


def surface_distance(scene, points):
    """Distance from each point to the nearest primitive surface."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return np.zeros(0)
    return np.min(np.stack([p.distance(points) for p in scene.primitives]), axis=0)
