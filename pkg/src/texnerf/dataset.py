"""Posed Pseudo-TeX image sets as written by the scene synthesizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .camera import CameraModel
from .errors import ValidationError
from .pseudotex import HsvImage, MappingMetadata


@dataclass
class PosedDataset:
    cameras: list
    images: np.ndarray  # (V, H, W, 3) HSV
    meta: MappingMetadata
    near: float
    far: float
    root: Path | None = None
    frames: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) == 0:
            raise ValidationError("dataset has no views")
        if self.images.shape[0] != len(self.cameras):
            raise ValidationError("one image per camera required")

    def __len__(self):
        return len(self.cameras)

    @property
    def height(self):
        return self.images.shape[1]

    @property
    def width(self):
        return self.images.shape[2]

    def split(self, holdout_every=8):
        """Train/held-out view ids; every ``holdout_every``-th view (1-based) is held out."""
        ids = np.arange(len(self))
        held = ids[(ids + 1) % holdout_every == 0] if holdout_every > 0 else ids[:0]
        return [int(i) for i in ids if i not in set(held)], [int(i) for i in held]

    def hsv_image(self, i):
        return HsvImage.from_stack(self.images[i])

    def _frame_file(self, i, key):
        if self.root is None or key not in self.frames[i]:
            raise ValidationError(f"view {i} has no {key!r} ground truth")
        return self.root / self.frames[i][key]

    def temperature(self, i):
        return io.read_pfm(self._frame_file(i, "temperature")).astype(np.float64)

    def foreground(self, i):
        return io.read_pgm(self._frame_file(i, "foreground")) > 0

    def material_names(self, i):
        return io.read_mask(self._frame_file(i, "mask")).material_names()

    def depth(self, i):
        return io.read_pfm(self._frame_file(i, "depth")).astype(np.float64)

    @classmethod
    def load(cls, root):
        root = Path(root)
        transforms = io.read_json(root / "transforms.json")
        info = io.read_json(root / "dataset.json") if (root / "dataset.json").exists() else {}
        frames = transforms["frames"]
        if not frames:
            raise ValidationError(f"{root}: transforms.json lists no frames")
        images = np.stack([io.read_pfm(root / f["file_path"]).astype(np.float64) for f in frames])
        H, W = images.shape[1:3]
        cams = [
            CameraModel.from_fov(W, H, transforms["camera_angle_x"], np.array(f["transform_matrix"], dtype=np.float64))
            for f in frames
        ]
        meta_path = root / info.get("mapping", "hsv/mapping.meta.json")
        if not meta_path.exists():
            meta_path = (root / frames[0]["file_path"]).with_suffix(".meta.json")
        meta = MappingMetadata.load(meta_path)
        return cls(
            cameras=cams,
            images=np.clip(images, 0.0, 1.0),
            meta=meta,
            near=float(info.get("near", 0.1)),
            far=float(info.get("far", 10.0)),
            root=root,
            frames=frames,
        )
