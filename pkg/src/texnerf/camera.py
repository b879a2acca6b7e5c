"""Pinhole camera model, orbit poses and per-pixel ray generation.

World is right-handed with +z up. Cameras look down their local -z axis,
with +x right and +y up in the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class CameraModel:
    width: int
    height: int
    focal: float
    c2w: np.ndarray

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValidationError("c2w must be 4x4")
        if not self.focal > 0:
            raise ValidationError("focal must be > 0")
        R = self.c2w[:3, :3]
        if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-9:
            raise ValidationError("c2w rotation block is not orthonormal")

    @classmethod
    def from_fov(cls, width, height, camera_angle_x, c2w):
        return cls(int(width), int(height), focal_from_fov(width, camera_angle_x), c2w)

    @property
    def camera_angle_x(self):
        return 2.0 * math.atan(0.5 * self.width / self.focal)

    @property
    def origin(self):
        return self.c2w[:3, 3].copy()


def focal_from_fov(width, camera_angle_x):
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix placing the camera at ``position`` facing ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(forward, up)) < 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = cam_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = position
    return c2w


def generate_orbit_poses(n, radius, elevation, lookat=(0.0, 0.0, 0.0), width=64, height=64, camera_angle_x=0.6981317):
    """``n`` cameras evenly spaced in azimuth (starting at 0 deg) on a circle at ``elevation`` degrees."""
    if n < 1:
        raise ValidationError("need at least one pose")
    if radius <= 0:
        raise ValidationError("orbit radius must be > 0")
    lookat = np.asarray(lookat, dtype=np.float64)
    el = math.radians(elevation)
    cams = []
    for i in range(n):
        az = 2.0 * math.pi * i / n
        offset = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(CameraModel.from_fov(width, height, camera_angle_x, look_at(lookat + offset, lookat)))
    return cams


def generate_rays(cam, pixel):
    """Origin and unit direction of the ray through the center of pixel ``(u, v)``.

    ``u`` is the column, ``v`` the row (row 0 at the top).
    """
    u, v = pixel
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValidationError(f"pixel {pixel} outside a {cam.width}x{cam.height} image")
    o, d = pixel_rays(cam, np.array([u]), np.array([v]))
    return o[0], d[0]


def pixel_rays(cam, u, v):
    """Vectorized :func:`generate_rays` over integer pixel arrays (no bounds check)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u + 0.5 - 0.5 * cam.width) / cam.focal
    y = -(v + 0.5 - 0.5 * cam.height) / cam.focal
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    d = d_cam @ cam.c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.c2w[:3, 3], d.shape).copy()
    return o, d


def image_rays(cam):
    """Rays for every pixel in row-major order, each ``(H*W, 3)``."""
    v, u = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    return pixel_rays(cam, u.ravel(), v.ravel())
