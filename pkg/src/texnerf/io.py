"""Readers and writers for the on-disk formats: PFM, PGM, PLY, cube manifests."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .radiometry import WavenumberGrid
from .texdecomp import MaterialMask, ThermalCube


def write_pfm(path, image):
    """Write float32 little-endian PFM (``Pf`` for 2-D, ``PF`` for H×W×3)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValidationError(f"PFM needs H×W or H×W×3, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        # PFM stores rows bottom to top
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if not m:
        raise ValidationError(f"{path}: not a PFM file")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=m.end())
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))[::-1]
    return arr.astype(np.float32)


def write_pgm(path, image, maxval=65535):
    """Binary PGM (P5); 16-bit samples are big-endian per the netpbm format."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValidationError("PGM needs a 2-D image")
    if np.any(img < 0) or np.any(img > maxval):
        raise ValidationError(f"PGM values must be in [0, {maxval}]")
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(img.astype(dtype).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValidationError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=m.end()).reshape(h, w)
    return arr.astype(np.int64)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_cube(manifest_path, cube):
    """Manifest JSON plus one single-channel PFM per band, next to the manifest."""
    manifest_path = Path(manifest_path)
    stem = manifest_path.name.removesuffix(".json")
    files = []
    for k in range(len(cube.grid)):
        name = f"{stem}_b{k:02d}.pfm"
        write_pfm(manifest_path.parent / name, cube.radiance[:, :, k])
        files.append(name)
    write_json(
        manifest_path,
        {"width": cube.width, "height": cube.height, "bands": [float(b) for b in cube.grid.cm1], "files": files},
    )


def read_cube(manifest_path):
    manifest_path = Path(manifest_path)
    meta = read_json(manifest_path)
    grid = WavenumberGrid.from_cm1(meta["bands"])
    if len(meta["files"]) != len(grid):
        raise ValidationError(f"{manifest_path}: {len(meta['files'])} files for {len(grid)} bands")
    planes = [read_pfm(manifest_path.parent / f).astype(np.float64) for f in meta["files"]]
    radiance = np.stack(planes, axis=-1)
    if radiance.shape[:2] != (meta["height"], meta["width"]):
        raise ValidationError(f"{manifest_path}: band images do not match declared size")
    return ThermalCube(grid, np.maximum(radiance, 0.0))


def write_mask(pgm_path, mask):
    pgm_path = Path(pgm_path)
    write_pgm(pgm_path, mask.labels, maxval=65535)
    write_json(pgm_path.with_suffix(".legend.json"), {str(k): v for k, v in sorted(mask.legend.items())})


def read_mask(pgm_path):
    pgm_path = Path(pgm_path)
    labels = read_pgm(pgm_path)
    legend = read_json(pgm_path.with_suffix(".legend.json"))
    return MaterialMask(labels, {int(k): v for k, v in legend.items()})


def write_ply(path, points, colors):
    """ASCII PLY 1.0 with float x,y,z and uchar red,green,blue."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = np.clip(np.round(np.asarray(colors, dtype=np.float64).reshape(-1, 3) * 255.0), 0, 255).astype(int)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}" for p, c in zip(points, rgb)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise ValidationError(f"{path}: not a PLY file")
    n = 0
    end = None
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            end = i
            break
    if end is None:
        raise ValidationError(f"{path}: missing end_header")
    body = [line.split() for line in text[end + 1 : end + 1 + n]]
    if not body:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=int)
    arr = np.array(body, dtype=np.float64)
    return arr[:, :3], arr[:, 3:6].astype(int)


def save_png(path, rgb):
    """8-bit PNG for viewing only."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(path, np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0))
