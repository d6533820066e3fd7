"""2D Gaussian surfels: parameterization, plane evaluation and ray hits.

A surfel is a flat elliptical Gaussian living in the tangent plane spanned by
the first two columns of its rotation. Learnable fields are stored in
unconstrained form (quaternion, log-scales, opacity logit) so any gradient
step yields a valid primitive after quaternion renormalization.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .geometry import Ray

CUTOFF_SQ = 9.0  # 3 sigma support, squared
NEAR_CLIP = 1e-4
GRAZING_EPS = 1e-9


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(..., 4) quaternions ``(w, x, y, z)`` to (..., 3, 3) rotations."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return rot.reshape(q.shape[:-1] + (3, 3))


def quat_to_rotmat_torch(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rot = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return rot.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat`, returning ``w >= 0`` quaternions."""
    rot = np.asarray(rot, dtype=np.float64)
    flat = rot.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out.reshape(rot.shape[:-2] + (4,))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


@dataclass
class Splat:
    """A single surfel. ``rot`` is a ``(w, x, y, z)`` quaternion."""

    mu: np.ndarray
    rot: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float = 0.0
    color: np.ndarray = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.color = np.full(3, 0.5) if self.color is None else np.asarray(self.color, dtype=np.float64)

    @classmethod
    def from_frame(cls, mu, t1, t2, scales, opacity=0.5, color=None) -> "Splat":
        t1 = np.asarray(t1, dtype=np.float64)
        t2 = np.asarray(t2, dtype=np.float64)
        rot = np.stack([t1, t2, np.cross(t1, t2)], axis=1)
        return cls(mu, rotmat_to_quat(rot), np.log(np.asarray(scales, dtype=np.float64)),
                   float(logit(opacity)), color)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.rot)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass(frozen=True)
class SplatHit:
    uv: np.ndarray
    depth: float
    gaussian_value: float


def local_to_world(splat: Splat, u: float, v: float) -> np.ndarray:
    rot = splat.rotation
    s1, s2 = splat.scales
    return splat.mu + s1 * rot[:, 0] * u + s2 * rot[:, 1] * v


def gaussian_weight(uv) -> float:
    r2 = float(uv[0]) ** 2 + float(uv[1]) ** 2
    if r2 > CUTOFF_SQ:
        return 0.0
    return float(np.exp(-0.5 * r2))


def splat_normal(splat: Splat) -> np.ndarray:
    rot = splat.rotation
    n = np.cross(rot[:, 0], rot[:, 1])
    return n / np.linalg.norm(n)


def intersect_ray_splat(ray: Ray, splat: Splat) -> Optional[SplatHit]:
    """Hit record of ``ray`` against the surfel's tangent plane, or ``None``."""
    rot = splat.rotation
    n = rot[:, 2]
    denom = float(n @ ray.direction)
    if abs(denom) < GRAZING_EPS:
        return None
    t = float(n @ (splat.mu - ray.origin)) / denom
    if t <= NEAR_CLIP:
        return None
    rel = ray.at(t) - splat.mu
    s1, s2 = splat.scales
    uv = np.array([rot[:, 0] @ rel / s1, rot[:, 1] @ rel / s2])
    g = gaussian_weight(uv)
    if g == 0.0:
        return None
    return SplatHit(uv, t, g)


@dataclass
class SplatSet:
    """Structure-of-arrays container for ``n`` surfels (all float64)."""

    mu: np.ndarray
    quat: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray

    FIELDS = ("mu", "quat", "log_scales", "opacity_logit", "color")

    def __post_init__(self):
        for name in self.FIELDS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n = len(self.mu)
        shapes = {"mu": (n, 3), "quat": (n, 4), "log_scales": (n, 2), "opacity_logit": (n,), "color": (n, 3)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> Splat:
        return Splat(self.mu[i], self.quat[i], self.log_scales[i], float(self.opacity_logit[i]), self.color[i])

    @classmethod
    def from_splats(cls, splats) -> "SplatSet":
        splats = list(splats)
        return cls(
            np.array([s.mu for s in splats]).reshape(-1, 3),
            np.array([s.rot for s in splats]).reshape(-1, 4),
            np.array([s.log_scales for s in splats]).reshape(-1, 2),
            np.array([s.opacity_logit for s in splats]).reshape(-1),
            np.array([s.color for s in splats]).reshape(-1, 3),
        )

    @classmethod
    def empty(cls) -> "SplatSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))

    def copy(self) -> "SplatSet":
        return SplatSet(*(getattr(self, f).copy() for f in self.FIELDS))

    def params(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in self.FIELDS}

    def subset(self, idx) -> "SplatSet":
        return SplatSet(*(getattr(self, f)[idx] for f in self.FIELDS))

    def normals(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)[:, :, 2]

    def tensors(self, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        return {
            f: torch.tensor(getattr(self, f), dtype=torch.float64, requires_grad=requires_grad)
            for f in self.FIELDS
        }

    def equals(self, other: "SplatSet") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.FIELDS)


# -- PLY serialization -----------------------------------------------------

_PLY_PROPS = ("x", "y", "z", "qw", "qx", "qy", "qz", "ls1", "ls2", "op_logit", "r", "g", "b")


def save_splats_ply(splats: SplatSet, path: str | Path) -> None:
    data = np.concatenate(
        [splats.mu, splats.quat, splats.log_scales, splats.opacity_logit[:, None], splats.color], axis=1
    ).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(splats)}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_splats_ply(path: str | Path) -> SplatSet:
    from .io import read_ply

    props = read_ply(path)["vertex"]
    missing = [p for p in _PLY_PROPS if p not in props]
    if missing:
        raise ValueError(f"{path}: not a splat PLY (missing {missing})")
    col = lambda k: np.asarray(props[k], dtype=np.float64)  # noqa: E731
    quat = np.stack([col("qw"), col("qx"), col("qy"), col("qz")], 1)
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return SplatSet(
        np.stack([col("x"), col("y"), col("z")], 1),
        quat,
        np.stack([col("ls1"), col("ls2")], 1),
        col("op_logit"),
        np.stack([col("r"), col("g"), col("b")], 1),
    )
