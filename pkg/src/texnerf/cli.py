"""``texnerf`` command line: one subcommand per pipeline stage.

Every subcommand takes the same flags::

    texnerf SUBCOMMAND [--config PATH|ref_scene] [--set key=value ...]
                       [--seed N] [--out DIR] [--threads N]

A config file is JSON. It is either flat (keys of one subcommand) or has
one section per subcommand; ``ref_scene`` names the built-in one. ``--set``
values are parsed as JSON when possible, and dotted keys reach into nested
tables (``--set field.width=64``). Each run writes ``resolved_config.json``
into its output directory; passing that file back as ``--config`` repeats
the run.

Exit status: 0 ok, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .camera import generate_orbit_poses
from .dataset import PosedDataset
from .errors import TexNerfRuntimeError, ValidationError
from .radiometry import load_spectral_library
from .scenesynth import (
    SceneDescription,
    builtin_path,
    emit_dataset,
    reference_library,
    reference_scene,
    scene_bbox,
    surface_distance,
)
from .texdecomp import DecompositionConfig, TeXImage, decompose_cube
from .pseudotex import MappingMetadata, build_palette, hsv_to_rgb, metadata_for, tex_to_hsv

log = logging.getLogger("texnerf")

SUBCOMMANDS = ("synth", "decompose", "map", "train", "render", "eval", "pointcloud")
BUILTIN_CONFIGS = {"ref_scene": "ref_scene.config.json"}


# subcommand configs ---------------------------------------------------------------


@dataclass
class SynthConfig:
    scene: str | dict = "ref_scene"  # builtin name, path, or inline description
    library: str = "builtin"
    n_views: int = 27
    width: int = 64
    height: int = 64
    camera_angle_x: float = 0.6981317
    radius: float = 2.5
    elevation: float = 45.0
    lookat: list = field(default_factory=lambda: [0.0, 0.0, 0.3])
    noise_sigma: float = 0.0
    t_margin: float = 5.0


@dataclass
class DecomposeConfig:
    data: str = ""
    library: str | None = None  # default: the dataset's library.csv
    views: list | None = None
    mode: str = "exact"
    reflection: str = "ambient"
    t_ref: float = 295.0
    t_ambient: float = 295.0
    eps_e: float = 0.01
    clamp_v0: bool = True


@dataclass
class MapConfig:
    input: str = ""  # a decompose output directory
    mapping: str | None = None  # existing .meta.json; default: fit ranges to the data
    percentiles: list = field(default_factory=lambda: [2.0, 98.0])
    margin: float = 0.0


@dataclass
class TrainCliConfig:
    data: str = ""
    resume: str | None = None
    train: dict = field(default_factory=dict)  # TrainConfig fields


@dataclass
class RenderConfig:
    checkpoint: str = ""
    data: str | None = None  # take cameras from this dataset ...
    views: list | None = None
    orbit: dict | None = None  # ... or from an orbit {n, radius, elevation, lookat, width, height, camera_angle_x}
    n_samples: int | None = None


@dataclass
class EvalConfig:
    checkpoint: str = ""
    data: str = ""
    views: list | None = None  # default: the held-out split used in training
    n_samples: int | None = None
    figures: bool = True


@dataclass
class PointcloudConfig:
    checkpoint: str = ""
    data: str | None = None  # scene.json here supplies the box and the distance check
    bbox: list | None = None  # [[xmin, ymin, zmin], [xmax, ymax, zmax]]
    margin: float = 0.05
    resolution: int = 64
    sigma_threshold: float = 10.0


CONFIG_TYPES = {
    "synth": SynthConfig,
    "decompose": DecomposeConfig,
    "map": MapConfig,
    "train": TrainCliConfig,
    "render": RenderConfig,
    "eval": EvalConfig,
    "pointcloud": PointcloudConfig,
}


# config plumbing ---------------------------------------------------------------------


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(cfg, item):
    if "=" not in item:
        raise ValidationError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ValidationError(f"bad --set key {key!r}")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(f"--set {key}: {p!r} is not a table")
    node[parts[-1]] = _parse_value(raw)


def _read_config_file(spec):
    if spec in BUILTIN_CONFIGS:
        return json.loads(builtin_path(BUILTIN_CONFIGS[spec]).read_text())
    path = Path(spec)
    if not path.exists():
        raise ValidationError(f"config {spec!r} is neither a file nor one of {sorted(BUILTIN_CONFIGS)}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def resolve_config(subcommand, config=None, overrides=(), seed=None):
    """Merge file, ``--set`` overrides and defaults into ``(typed config, seed)``."""
    raw = {}
    if config is not None:
        obj = _read_config_file(config)
        if not isinstance(obj, dict):
            raise ValidationError("config file must hold a JSON object")
        if "subcommand" in obj and "config" in obj:  # a resolved snapshot
            if obj["subcommand"] != subcommand:
                raise ValidationError(f"snapshot is for {obj['subcommand']!r}, not {subcommand!r}")
            seed = obj.get("seed") if seed is None else seed
            raw = dict(obj["config"])
        elif set(obj) & set(SUBCOMMANDS):
            raw = dict(obj.get(subcommand, {}))
            if subcommand == "train" and "train" in raw and not isinstance(raw["train"], dict):
                raise ValidationError("train section must be a table")
        else:
            raw = dict(obj)
    raw = json.loads(json.dumps(raw))  # deep copy
    for item in overrides:
        _apply_override(raw, item)
    cls = CONFIG_TYPES[subcommand]
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown {subcommand} config keys: {unknown}; known: {sorted(known)}")
    try:
        cfg = cls(**raw)
    except TypeError as exc:
        raise ValidationError(f"bad {subcommand} config: {exc}") from None
    return cfg, (0 if seed is None else int(seed))


def write_snapshot(out, subcommand, cfg, seed):
    io.write_json(Path(out) / "resolved_config.json", {"subcommand": subcommand, "seed": seed, "config": asdict(cfg)})


def _need(value, name, subcommand):
    if not value:
        raise ValidationError(f"{subcommand}: set {name} (e.g. --set {name}=PATH)")
    path = Path(value)
    if not path.exists():
        raise ValidationError(f"{subcommand}: {name} {str(path)!r} does not exist")
    return path


# subcommands -------------------------------------------------------------------------


def _load_scene(spec):
    if isinstance(spec, dict):
        return SceneDescription.from_json(spec)
    if spec == "ref_scene":
        return reference_scene()
    return SceneDescription.load(_need(spec, "scene", "synth"))


def run_synth(cfg, seed, out):
    scene = _load_scene(cfg.scene)
    library = reference_library() if cfg.library == "builtin" else load_spectral_library(_need(cfg.library, "library", "synth"))
    poses = generate_orbit_poses(
        cfg.n_views,
        cfg.radius,
        cfg.elevation,
        lookat=cfg.lookat,
        width=cfg.width,
        height=cfg.height,
        camera_angle_x=cfg.camera_angle_x,
    )
    emit_dataset(scene, poses, out, library, noise_sigma=cfg.noise_sigma, seed=seed, t_margin=cfg.t_margin)
    print(f"synth: {len(poses)} views of {cfg.width}x{cfg.height} written to {out}")


def run_decompose(cfg, seed, out):
    root = _need(cfg.data, "data", "decompose")
    transforms = io.read_json(root / "transforms.json")
    lib_path = Path(cfg.library) if cfg.library else root / "library.csv"
    library = load_spectral_library(_need(str(lib_path), "library", "decompose"))
    dcfg = DecompositionConfig(
        t_ref=cfg.t_ref, eps_e=cfg.eps_e, mode=cfg.mode, t_ambient=cfg.t_ambient,
        reflection=cfg.reflection, clamp_v0=cfg.clamp_v0,
    )
    frames = transforms["frames"]
    views = range(len(frames)) if cfg.views is None else cfg.views
    (out / "tex").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    index = []
    print(f"{'view':>5} {'unsolved':>8} {'clamped':>8} {'T err K':>9}")
    for i in views:
        if not 0 <= i < len(frames):
            raise ValidationError(f"decompose: view {i} not in dataset (0..{len(frames) - 1})")
        frame = frames[i]
        name = f"r_{i:03d}"
        cube = io.read_cube(root / frame["cube"])
        mask = io.read_mask(root / frame["mask"])
        tex = decompose_cube(cube, mask, library, dcfg)
        io.write_pfm(out / "tex" / f"{name}_T.pfm", tex.T)
        io.write_pfm(out / "tex" / f"{name}_X.pfm", tex.X)
        io.write_mask(out / "masks" / f"{name}.pgm", mask)
        err = float("nan")
        if "temperature" in frame:
            gt = io.read_pfm(root / frame["temperature"]).astype(np.float64)
            ok = np.isfinite(tex.T)
            err = float(np.max(np.abs(tex.T[ok] - gt[ok]))) if ok.any() else float("nan")
        index.append({"view": int(i), "T": f"tex/{name}_T.pfm", "X": f"tex/{name}_X.pfm", "mask": f"masks/{name}.pgm",
                      "unsolved": tex.nan_count, "clamped": tex.clamped_count, "max_abs_T_error_K": err})
        print(f"{i:>5} {tex.nan_count:>8} {tex.clamped_count:>8} {err:>9.4f}")
    io.write_json(out / "decompose.json", {"views": index})


def run_map(cfg, seed, out):
    root = _need(cfg.input, "input", "map")
    index = io.read_json(_need(str(root / "decompose.json"), "input", "map"))["views"]
    texes = []
    for entry in index:
        mask = io.read_mask(root / entry["mask"])
        T = io.read_pfm(root / entry["T"]).astype(np.float64)
        X = io.read_pfm(root / entry["X"]).astype(np.float64)
        texes.append((entry["view"], TeXImage(T=T, material=mask, X=X, v0=np.ones_like(T))))
    if cfg.mapping:
        meta = MappingMetadata.load(_need(cfg.mapping, "mapping", "map"))
    else:
        names = sorted({n for _, t in texes for n in t.material.legend.values()})
        allT = np.concatenate([t.T[np.isfinite(t.T)] for _, t in texes])
        allX = np.concatenate([t.X[np.isfinite(t.X)] for _, t in texes])
        if allT.size == 0:
            raise ValidationError("map: no solved pixels to fit the mapping ranges")
        meta = metadata_for(allT, allX, build_palette(names), percentiles=tuple(cfg.percentiles), margin=cfg.margin)
    (out / "hsv").mkdir(parents=True, exist_ok=True)
    meta.save(out / "hsv" / "mapping.meta.json")
    for view, tex in texes:
        hsv = tex_to_hsv(tex, meta)
        name = f"r_{view:03d}"
        io.write_pfm(out / "hsv" / f"{name}.pfm", hsv.stack())
        meta.save(out / "hsv" / f"{name}.meta.json")
        io.save_png(out / "hsv" / f"{name}.png", hsv_to_rgb(hsv))
    print(f"map: {len(texes)} Pseudo-TeX images written to {out / 'hsv'}")


def run_train(cfg, seed, out):
    from .trainer import TrainConfig, read_metrics, train, window_decrease_fraction
    from .plotting import plot_training_curve

    dataset = PosedDataset.load(_need(cfg.data, "data", "train"))
    tdict = dict(cfg.train)
    tdict["seed"] = seed
    tcfg = TrainConfig.from_dict(tdict)
    resume = _need(cfg.resume, "resume", "train") if cfg.resume else None

    def progress(it, mean, ph):
        print(f"iter {it:6d}  loss {mean[0]:.5f}  (h {mean[1]:.5f} s {mean[2]:.5f} v {mean[3]:.5f})  holdout {ph:.2f} dB",
              flush=True)

    trainer = train(dataset, tcfg, out, resume_from=resume, progress=progress)
    rows = read_metrics(out / "metrics.csv")
    if rows:
        plot_training_curve(rows, out / "figures" / "training_curve.png")
        frac = window_decrease_fraction([float(r["loss"]) for r in rows])
        print(f"train: {trainer.iteration} iterations, decreasing windows {frac:.3f}, model at {out / 'model.ckpt'}")
    else:
        print(f"train: {trainer.iteration} iterations, model at {out / 'model.ckpt'}")


def _render_settings(meta, n_samples):
    n = n_samples or meta["train_config"]["samples_per_ray"]
    return float(meta["near"]), float(meta["far"]), int(n)


def run_render(cfg, seed, out):
    from .evaluate import render_view
    from .trainer import load_model

    model, meta = load_model(_need(cfg.checkpoint, "checkpoint", "render"))
    near, far, n = _render_settings(meta, cfg.n_samples)
    if cfg.orbit is not None:
        o = dict(cfg.orbit)
        cams = generate_orbit_poses(o.pop("n", 8), o.pop("radius", 2.5), o.pop("elevation", 45.0), **o)
        views = list(range(len(cams)))
    elif cfg.data:
        dataset = PosedDataset.load(_need(cfg.data, "data", "render"))
        cams = dataset.cameras
        views = list(range(len(cams))) if cfg.views is None else cfg.views
    else:
        raise ValidationError("render: set data=DATASET or orbit={...}")
    (out / "render").mkdir(parents=True, exist_ok=True)
    for i in views:
        if not 0 <= i < len(cams):
            raise ValidationError(f"render: view {i} out of range")
        img = render_view(model, cams[i], near, far, n)
        io.write_pfm(out / "render" / f"r_{i:03d}.pfm", img.stack())
        io.save_png(out / "render" / f"r_{i:03d}.png", hsv_to_rgb(img))
        io.write_json(out / "render" / f"r_{i:03d}.camera.json",
                      {"width": cams[i].width, "height": cams[i].height, "camera_angle_x": cams[i].camera_angle_x,
                       "transform_matrix": cams[i].c2w.tolist()})
    print(f"render: {len(views)} views written to {out / 'render'}")


def run_eval(cfg, seed, out):
    from .evaluate import evaluate_views
    from .plotting import plot_eval_summary, plot_view_comparison
    from .trainer import load_model

    model, meta = load_model(_need(cfg.checkpoint, "checkpoint", "eval"))
    dataset = PosedDataset.load(_need(cfg.data, "data", "eval"))
    near, far, n = _render_settings(meta, cfg.n_samples)
    if cfg.views is None:
        _, views = dataset.split(meta["train_config"]["holdout_every"])
    else:
        views = list(cfg.views)
    if not views:
        raise ValidationError("eval: no views to evaluate")
    renders = {}
    report = evaluate_views(model, dataset, views, near, far, n, renders=renders)
    report.save(out / "eval.json")
    table = report.table()
    (out / "eval.txt").write_text(table + "\n")
    with (out / "eval.csv").open("w") as fh:
        keys = list(asdict(report.views[0]))
        fh.write(",".join(keys) + "\n")
        for v in report.views:
            fh.write(",".join(repr(x) for x in asdict(v).values()) + "\n")
    if cfg.figures:
        plot_eval_summary(report, out / "figures" / "eval_summary.png")
        for i in views:
            plot_view_comparison(renders[i], dataset.hsv_image(i), dataset.meta, out / "figures" / f"view_{i:03d}.png",
                                 gt_T=dataset.temperature(i), mask=dataset.foreground(i), title=f"view {i}")
    print(table)


def run_pointcloud(cfg, seed, out):
    from .evaluate import export_point_cloud, voxel_diagonal
    from .trainer import load_model

    model, _ = load_model(_need(cfg.checkpoint, "checkpoint", "pointcloud"))
    scene = None
    if cfg.data:
        scene = SceneDescription.load(_need(str(Path(cfg.data) / "scene.json"), "data", "pointcloud"))
    if cfg.bbox is not None:
        bbox = (np.asarray(cfg.bbox[0], float), np.asarray(cfg.bbox[1], float))
    elif scene is not None:
        bbox = scene_bbox(scene, cfg.margin)
    else:
        raise ValidationError("pointcloud: set bbox=[[..],[..]] or data=DATASET")
    if np.any(bbox[1] <= bbox[0]):
        raise ValidationError("pointcloud: bbox max must exceed min on every axis")
    pts, _ = export_point_cloud(model, bbox, cfg.resolution, cfg.sigma_threshold, path=out / "cloud.ply")
    summary = {"points": int(pts.shape[0]), "bbox": [b.tolist() for b in bbox], "resolution": cfg.resolution,
               "sigma_threshold": cfg.sigma_threshold, "voxel_diagonal": voxel_diagonal(bbox, cfg.resolution)}
    if scene is not None and pts.shape[0]:
        dist = surface_distance(scene, pts)
        summary["within_1.5_voxel_diagonals"] = float(np.mean(dist <= 1.5 * summary["voxel_diagonal"]))
        summary["median_surface_distance"] = float(np.median(dist))
    io.write_json(out / "pointcloud.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))


RUNNERS = {
    "synth": run_synth,
    "decompose": run_decompose,
    "map": run_map,
    "train": run_train,
    "render": run_render,
    "eval": run_eval,
    "pointcloud": run_pointcloud,
}


# entry point -------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="texnerf", description="Thermal TeX decomposition and HSV radiance fields.")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    helps = {
        "synth": "render a synthetic posed dataset from a scene description",
        "decompose": "per-pixel TeX decomposition of a dataset's radiance cubes",
        "map": "map decomposed TeX images to Pseudo-TeX HSV images",
        "train": "fit a radiance field to a posed HSV dataset",
        "render": "render views from a trained checkpoint",
        "eval": "score held-out views (PSNR, SSIM, temperature MAE, materials)",
        "pointcloud": "export the density field as a PLY point cloud",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", metavar="PATH", help="JSON config file or a built-in name (ref_scene)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", metavar="DIR", default=None, help=f"output directory (default: ./{name}_out)")
        p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: available cores)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _available_cores():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = args.threads if args.threads is not None else _available_cores()
        if threads < 1:
            raise ValidationError("--threads must be >= 1")
        cfg, seed = resolve_config(args.subcommand, args.config, args.overrides, args.seed)
        out = Path(args.out or f"{args.subcommand}_out")
        out.mkdir(parents=True, exist_ok=True)
        write_snapshot(out, args.subcommand, cfg, seed)
        with threadpool_limits(limits=threads):
            RUNNERS[args.subcommand](cfg, seed, out)
    except ValidationError as exc:
        print(f"texnerf {args.subcommand}: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"texnerf {args.subcommand}: error: missing file {exc.filename}", file=sys.stderr)
        return 1
    except (TexNerfRuntimeError, OSError, ArithmeticError) as exc:
        print(f"texnerf {args.subcommand}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
