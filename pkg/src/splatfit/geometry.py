"""Pinhole cameras, viewing rays and point (re)projection.

Conventions
-----------
* Poses are stored camera-to-world (``c2w``, 3x4). Camera axes follow the
  OpenCV layout: +x right, +y down, +z forward.
* Pixel centers sit at ``(i + 0.5, j + 0.5)``.
* Every depth handed around outside this module is a *ray parameter*: the
  Euclidean distance from the camera center along a unit direction. The
  camera-frame ``z`` only appears inside projection.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import BehindCamera, NonPositiveDepth

Z_EPS = 1e-9


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray = field(repr=False)

    def __post_init__(self):
        c2w = np.asarray(self.c2w, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "c2w", c2w)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        rot = c2w[:, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or np.linalg.det(rot) < 0:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:, :3]

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:, 3]

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def world_to_camera(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.center) @ self.rotation

    def with_pose(self, c2w: np.ndarray) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, c2w)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "c2w": [float(v) for v in self.c2w.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), np.asarray(d["c2w"], dtype=np.float64).reshape(3, 4),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Camera":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compose_poses(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return the 3x4 rigid transform ``a @ b``."""
    a = np.asarray(a, dtype=np.float64).reshape(3, 4)
    b = np.asarray(b, dtype=np.float64).reshape(3, 4)
    rot = a[:, :3] @ b[:, :3]
    return np.concatenate([rot, (a[:, :3] @ b[:, 3] + a[:, 3])[:, None]], axis=1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from ``eye`` toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return np.concatenate([rot, eye[:, None]], axis=1)


def ray_through_pixel(camera: Camera, pixel) -> Ray:
    px, py = float(pixel[0]), float(pixel[1])
    assert 0.0 <= px <= camera.width and 0.0 <= py <= camera.height, "pixel out of bounds"
    d_cam = np.array([(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, 1.0])
    d = camera.rotation @ d_cam
    return Ray(camera.center.copy(), d / np.linalg.norm(d))


def project_point(camera: Camera, x) -> tuple[np.ndarray, float]:
    """Project a world point; returns ``(pixel, camera-frame z)``."""
    xc = camera.world_to_camera(x)
    if xc[2] <= Z_EPS:
        raise BehindCamera(f"camera-frame z={xc[2]:.3g} is not in front of the camera")
    pixel = np.array([camera.fx * xc[0] / xc[2] + camera.cx, camera.fy * xc[1] / xc[2] + camera.cy])
    return pixel, float(xc[2])


def unproject_pixel(camera: Camera, pixel, depth: float) -> np.ndarray:
    """World point at ray parameter ``depth`` through ``pixel``."""
    if not depth > 0:
        raise NonPositiveDepth(f"ray depth must be positive, got {depth}")
    return ray_through_pixel(camera, pixel).at(depth)


# -- batched helpers -------------------------------------------------------

def pixel_centers(camera: Camera) -> np.ndarray:
    """(H, W, 2) array of pixel-center coordinates ``(x, y)``."""
    xs = np.arange(camera.width) + 0.5
    ys = np.arange(camera.height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def pixel_directions(camera: Camera, pixels: np.ndarray | None = None) -> np.ndarray:
    """Unit world-space ray directions for ``pixels`` (default: all centers)."""
    if pixels is None:
        pixels = pixel_centers(camera)
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack(
        [(pixels[..., 0] - camera.cx) / camera.fx, (pixels[..., 1] - camera.cy) / camera.fy,
         np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; no behind-camera check (inspect the returned z)."""
    xc = camera.world_to_camera(points)
    z = xc[..., 2]
    safe = np.where(np.abs(z) > Z_EPS, z, Z_EPS)
    pix = np.stack([camera.fx * xc[..., 0] / safe + camera.cx, camera.fy * xc[..., 1] / safe + camera.cy], -1)
    return pix, z


def project_points_torch(camera: Camera, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    rot = torch.as_tensor(camera.rotation, dtype=points.dtype)
    center = torch.as_tensor(camera.center, dtype=points.dtype)
    xc = (points - center) @ rot
    z = xc[..., 2]
    safe = torch.where(z.abs() > Z_EPS, z, torch.full_like(z, Z_EPS))
    pix = torch.stack([camera.fx * xc[..., 0] / safe + camera.cx, camera.fy * xc[..., 1] / safe + camera.cy], -1)
    return pix, z


def make_camera(width: int, height: int, fov_deg: float, c2w: np.ndarray) -> Camera:
    """Square-pixel camera with horizontal field of view ``fov_deg``."""
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    return Camera(f, f, width / 2.0, height / 2.0, width, height, c2w)
