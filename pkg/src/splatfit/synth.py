"""Synthetic ground truth: SDF scenes, sphere-traced views, surface samples,
a monotone-warp monocular depth surrogate and surfel initialization.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidBundle, InvalidSpec
from .geometry import Camera, look_at, make_camera, pixel_directions, project_points
from .io import read_pfm, read_png, read_points_ply, write_pfm, write_png, write_points_ply
from .renderer import depth_to_normal
from .splats import SplatSet, rotmat_to_quat

HIT_EPS = 1e-7
MAX_STEPS = 2000


def derive_seed(seed: int, purpose: str) -> int:
    """Stable sub-seed for ``purpose`` from the run seed."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose))


# -- scene description -------------------------------------------------------

@dataclass
class SceneSpec:
    primitives: list = field(default_factory=lambda: [{"type": "sphere", "center": [0, 0, 0], "radius": 0.5}])
    blend: float = 0.0
    texture: dict = field(default_factory=lambda: {
        "kind": "checker", "scale": 0.12, "colors": [[0.85, 0.55, 0.3], [0.25, 0.45, 0.75]]})
    rig: dict = field(default_factory=lambda: {
        "count": 3, "radius": 2.5, "elevation": 25.0, "azimuth": -90.0, "spread": 30.0,
        "look_at": [0.0, 0.0, 0.0], "fov": 40.0})
    heldout: dict = field(default_factory=lambda: {"count": 3, "elevation": 40.0})
    width: int = 64
    height: int = 64
    seed: int = 0
    mono: dict = field(default_factory=lambda: {"gamma": 0.8, "a": 1.5, "b": 0.2, "noise": 0.002})
    n_points: int = 100_000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.primitives:
            raise InvalidSpec("scene needs at least one primitive")
        for p in self.primitives:
            kind = p.get("type")
            c = np.asarray(p.get("center", [0, 0, 0]), dtype=np.float64)
            if c.shape != (3,):
                raise InvalidSpec(f"bad center {p.get('center')}")
            if kind == "sphere":
                if not p.get("radius", 0) > 0:
                    raise InvalidSpec("sphere radius must be positive")
                extent = np.linalg.norm(c) + p["radius"]
            elif kind == "box":
                h = np.asarray(p.get("half_extents", []), dtype=np.float64)
                if h.shape != (3,) or (h <= 0).any():
                    raise InvalidSpec("box half_extents must be three positive numbers")
                extent = np.linalg.norm(np.abs(c) + h)
            else:
                raise InvalidSpec(f"unknown primitive type {kind!r}")
            if extent > 1.0 + 1e-9:
                raise InvalidSpec("scene must fit inside the unit sphere")
        if self.blend < 0:
            raise InvalidSpec("blend must be non-negative")
        if int(self.rig.get("count", 0)) < 2:
            raise InvalidSpec("the camera rig needs at least 2 views")
        if self.width < 4 or self.height < 4:
            raise InvalidSpec("image too small")
        if self.texture.get("kind") not in ("checker", "marble"):
            raise InvalidSpec(f"unknown texture {self.texture.get('kind')!r}")
        mono = self.mono
        if not (mono.get("gamma", 1) > 0 and mono.get("a", 1) > 0 and mono.get("noise", 0) >= 0):
            raise InvalidSpec("mono warp needs gamma > 0, a > 0, noise >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        base = cls()
        merged = {}
        for k, v in d.items():
            if not hasattr(base, k):
                raise InvalidSpec(f"unknown scene key {k!r}")
            default = getattr(base, k)
            merged[k] = {**default, **v} if isinstance(default, dict) and isinstance(v, dict) else v
        try:
            return cls(**merged)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidSpec):
                raise
            raise InvalidSpec(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "SceneSpec":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidSpec(f"cannot read scene spec {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidSpec("scene spec must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def preset(cls, name: str, **overrides) -> "SceneSpec":
        if name == "sphere":
            d = {}
        elif name == "reference":
            d = {
                "primitives": [
                    {"type": "sphere", "center": [-0.28, 0.0, 0.05], "radius": 0.36},
                    {"type": "box", "center": [0.3, 0.02, -0.08], "half_extents": [0.22, 0.25, 0.22]},
                ],
                "blend": 0.05,
            }
        else:
            raise InvalidSpec(f"unknown preset {name!r}")
        d.update(overrides)
        return cls.from_dict(d)


# -- SDF evaluation ----------------------------------------------------------

def _smin(a, b, k):
    if k <= 0:
        return np.minimum(a, b)
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def scene_sdf(spec: SceneSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = None
    for p in spec.primitives:
        c = np.asarray(p["center"], dtype=np.float64)
        if p["type"] == "sphere":
            d = np.linalg.norm(x - c, axis=-1) - p["radius"]
        else:
            q = np.abs(x - c) - np.asarray(p["half_extents"], dtype=np.float64)
            d = np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)
        out = d if out is None else _smin(out, d, spec.blend)
    return out


def sdf_normal(spec: SceneSpec, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.stack(
        [scene_sdf(spec, x + h * e) - scene_sdf(spec, x - h * e) for e in np.eye(3)], axis=-1
    ) / (2 * h)
    return grad / np.maximum(np.linalg.norm(grad, axis=-1, keepdims=True), 1e-12)


def albedo(spec: SceneSpec, x: np.ndarray) -> np.ndarray:
    tex = spec.texture
    a, b = (np.asarray(c, dtype=np.float64) for c in tex.get("colors", [[0.85, 0.55, 0.3], [0.25, 0.45, 0.75]]))
    s = float(tex.get("scale", 0.12))
    if tex["kind"] == "checker":
        parity = (np.floor(x / s).astype(np.int64).sum(axis=-1) % 2)[..., None]
        return np.where(parity == 0, a, b)
    t = 0.5 + 0.5 * np.sin((x[..., 0] + 0.5 * np.sin(3.0 * x[..., 1]) + 0.3 * np.sin(5.0 * x[..., 2])) / s)
    return a * t[..., None] + b * (1 - t[..., None])


def sphere_trace(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Ray depth to the zero set (0 where the ray misses)."""
    dirs = dirs.reshape(-1, 3)
    oc = origin @ dirs.T
    disc = oc ** 2 - (origin @ origin - 1.05 ** 2)
    t = np.where(disc > 0, -oc - np.sqrt(np.maximum(disc, 0)), np.inf)
    t_far = np.where(disc > 0, -oc + np.sqrt(np.maximum(disc, 0)), -np.inf)
    t = np.maximum(t, 0.0)
    depth = np.zeros(len(dirs))
    active = np.flatnonzero(disc > 0)
    for _ in range(MAX_STEPS):
        if len(active) == 0:
            break
        d = scene_sdf(spec, origin + t[active, None] * dirs[active])
        hit = np.abs(d) < HIT_EPS
        depth[active[hit]] = t[active[hit]]
        t[active] += d
        alive = ~hit & (t[active] <= t_far[active])
        active = active[alive]
    return depth


def shade(spec: SceneSpec, camera: Camera, points: np.ndarray) -> np.ndarray:
    """Lambertian shading from two lights fixed in the camera frame."""
    lights_cam = np.array([[-0.5, -0.6, -1.0], [0.7, 0.2, -0.6]])
    lights_cam /= np.linalg.norm(lights_cam, axis=1, keepdims=True)
    lights = lights_cam @ camera.rotation.T
    n = sdf_normal(spec, points)
    lum = 0.25 + 0.6 * np.maximum(n @ lights[0], 0.0) + 0.35 * np.maximum(n @ lights[1], 0.0)
    return np.clip(albedo(spec, points) * np.clip(lum, 0.0, 1.2)[:, None], 0.0, 1.0)


def render_gt(spec: SceneSpec, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    dirs = pixel_directions(camera).reshape(-1, 3)
    depth = sphere_trace(spec, camera.center, dirs)
    image = np.zeros((len(dirs), 3))
    hit = depth > 0
    pts = camera.center + depth[hit, None] * dirs[hit]
    image[hit] = shade(spec, camera, pts)
    H, W = camera.shape
    return image.reshape(H, W, 3), depth.reshape(H, W)


def _scene_bounds(spec: SceneSpec, pad: float) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for p in spec.primitives:
        c = np.asarray(p["center"], dtype=np.float64)
        h = np.full(3, p["radius"]) if p["type"] == "sphere" else np.asarray(p["half_extents"], dtype=np.float64)
        lo, hi = np.minimum(lo, c - h), np.maximum(hi, c + h)
    return lo - pad, hi + pad


def sample_surface(spec: SceneSpec, n: int, rng: np.random.Generator, band: float = 0.01):
    """Rejection-sample a thin band around the zero set and project onto it."""
    lo, hi = _scene_bounds(spec, 2 * band + spec.blend)
    chunks, got = [], 0
    while got < n:
        x = rng.uniform(lo, hi, size=(500_000, 3))
        x = x[np.abs(scene_sdf(spec, x)) < band]
        for _ in range(10):
            d = scene_sdf(spec, x)
            x = x - d[:, None] * sdf_normal(spec, x)
        x = x[np.abs(scene_sdf(spec, x)) < 1e-7]
        chunks.append(x)
        got += len(x)
    pts = np.concatenate(chunks)[:n]
    return pts, sdf_normal(spec, pts)


def rig_cameras(spec: SceneSpec) -> tuple[list[Camera], list[Camera]]:
    rig = spec.rig
    n = int(rig["count"])
    r, fov = float(rig["radius"]), float(rig["fov"])
    target = np.asarray(rig.get("look_at", [0, 0, 0]), dtype=np.float64)

    def cam(az, el):
        az, el = np.deg2rad(az), np.deg2rad(el)
        eye = target + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        return make_camera(spec.width, spec.height, fov, look_at(eye, target))

    az0, spread = float(rig["azimuth"]), float(rig["spread"])
    train_az = az0 + (np.arange(n) - (n - 1) / 2.0) * spread
    train = [cam(a, float(rig["elevation"])) for a in train_az]
    m = int(spec.heldout.get("count", 0))
    held_az = az0 + (np.arange(m) - (m - 1) / 2.0) * spread * (n - 1) / max(m, 1) if m else []
    held = [cam(a, float(spec.heldout.get("elevation", rig["elevation"]))) for a in held_az]
    return train, held


# -- ground truth ------------------------------------------------------------

@dataclass
class GroundTruth:
    cameras: list
    images: list
    depths: list
    monos: list
    points: np.ndarray
    point_normals: Optional[np.ndarray] = None
    heldout_cameras: list = field(default_factory=list)
    heldout_images: list = field(default_factory=list)
    heldout_depths: list = field(default_factory=list)
    spec: Optional[SceneSpec] = None

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def mono_surrogate(gt_depth, gamma: float = 1.0, a: float = 1.0, b: float = 0.0,
                   sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """Relative-depth stand-in: ``a * D**gamma + b`` plus seeded noise.

    Uncovered pixels (``D <= 0``) receive the largest covered value.
    """
    if not (gamma > 0 and a > 0):
        raise ValueError("mono warp needs gamma > 0 and a > 0")
    D = np.asarray(gt_depth, dtype=np.float64)
    cov = D > 0
    out = np.zeros_like(D)
    out[cov] = a * D[cov] ** gamma + b
    if sigma > 0:
        out[cov] += np.random.default_rng(seed).normal(0.0, sigma, size=int(cov.sum()))
    out[~cov] = out[cov].max() if cov.any() else 0.0
    return out


def generate_scene(spec: SceneSpec) -> GroundTruth:
    spec.validate()
    train, held = rig_cameras(spec)
    images, depths, monos = [], [], []
    m = spec.mono
    for i, cam in enumerate(train):
        img, depth = render_gt(spec, cam)
        images.append(img)
        depths.append(depth)
        cov = depth > 0
        warped = m["a"] * depth[cov] ** m["gamma"] + m["b"]
        rng_range = float(warped.max() - warped.min()) if cov.any() else 0.0
        monos.append(mono_surrogate(depth, m["gamma"], m["a"], m["b"], m["noise"] * rng_range,
                                    derive_seed(spec.seed, f"mono{i}")))
    h_imgs, h_depths = [], []
    for cam in held:
        img, depth = render_gt(spec, cam)
        h_imgs.append(img)
        h_depths.append(depth)
    pts, normals = sample_surface(spec, spec.n_points, rng_for(spec.seed, "points"))
    return GroundTruth(train, images, depths, monos, pts, normals, held, h_imgs, h_depths, spec)


# -- initialization ----------------------------------------------------------

def _frames_from_normals(normals: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    spin = rng.uniform(0, 2 * np.pi, size=(len(n), 1))
    a = np.cos(spin) * t1 + np.sin(spin) * t2
    b = np.cross(n, a)
    return np.stack([a, b, n], axis=2)


def _colors_from_views(gt: GroundTruth, pos: np.ndarray, tol: float) -> np.ndarray:
    colors = np.full((len(pos), 3), 0.5)
    best = np.full(len(pos), np.inf)
    for cam, img, depth in zip(gt.cameras, gt.images, gt.depths):
        pix, z = project_points(cam, pos)
        inside = (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < cam.width) & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height)
        idx = np.flatnonzero(inside)
        px = pix[idx].astype(np.int64)
        d_gt = depth[px[:, 1], px[:, 0]]
        err = np.abs(np.linalg.norm(pos[idx] - cam.center, axis=1) - d_gt)
        ok = (d_gt > 0) & (err < tol) & (err < best[idx])
        sel = idx[ok]
        colors[sel] = img[px[ok, 1], px[ok, 0]]
        best[sel] = err[ok]
    return colors


def init_splats(gt: GroundTruth, n: int, sigma_p: float = 0.02, mode: str = "surface-sample",
                seed: int = 0, k: float = 1.0) -> SplatSet:
    if n < 1:
        raise ValueError("need at least one splat")
    rng = rng_for(seed, "init")
    if mode == "surface-sample":
        if gt.point_normals is None:
            raise ValueError("surface sampling needs point normals")
        idx = rng.choice(len(gt.points), size=n, replace=len(gt.points) < n)
        pos, normals = gt.points[idx].copy(), gt.point_normals[idx]
    elif mode == "depth-backproject":
        pts, nrm = [], []
        for cam, depth in zip(gt.cameras, gt.depths):
            cov = depth.reshape(-1) > 0
            dirs = pixel_directions(cam).reshape(-1, 3)[cov]
            pts.append(cam.center + depth.reshape(-1)[cov, None] * dirs)
            nm = depth_to_normal(cam, depth).reshape(-1, 3)[cov]
            missing = np.linalg.norm(nm, axis=1) == 0
            nm[missing] = -dirs[missing]
            nrm.append(nm)
        pts, nrm = np.concatenate(pts), np.concatenate(nrm)
        idx = rng.choice(len(pts), size=n, replace=len(pts) < n)
        pos, normals = pts[idx].copy(), nrm[idx]
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    pos += rng.normal(0.0, sigma_p, size=pos.shape)
    quat = rotmat_to_quat(_frames_from_normals(normals, rng))
    if n > 1:
        kk = min(4, n)
        dist, _ = cKDTree(pos).query(pos, k=kk)
        nn = dist[:, 1:].mean(axis=1)
    else:
        nn = np.array([0.05])
    scale = np.clip(k * nn, 1e-4, 1.0)
    log_scales = np.repeat(np.log(scale)[:, None], 2, axis=1)
    colors = _colors_from_views(gt, pos, tol=max(0.03, 3 * sigma_p))
    return SplatSet(pos, quat, log_scales, np.zeros(n), colors)


# -- bundle layout -----------------------------------------------------------

def write_bundle(gt: GroundTruth, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = gt.spec.to_dict() if gt.spec is not None else {}
    (out / "spec.json").write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
    for i, (cam, img, depth, mono) in enumerate(zip(gt.cameras, gt.images, gt.depths, gt.monos)):
        cam.save(out / f"cam_{i}.json")
        write_png(out / f"rgb_{i}.png", img)
        write_pfm(out / f"depth_{i}.pfm", depth)
        write_pfm(out / f"mono_{i}.pfm", mono)
        write_png(out / f"mask_{i}.png", np.repeat((depth > 0)[..., None], 3, axis=2).astype(np.float64))
    write_points_ply(out / "gt_points.ply", gt.points, gt.point_normals)
    if gt.heldout_cameras:
        held = out / "heldout"
        held.mkdir(exist_ok=True)
        for i, (cam, img, depth) in enumerate(zip(gt.heldout_cameras, gt.heldout_images, gt.heldout_depths)):
            cam.save(held / f"cam_{i}.json")
            write_png(held / f"rgb_{i}.png", img)
            write_pfm(held / f"depth_{i}.pfm", depth)
    return out


def _require(path: Path) -> Path:
    if not path.is_file():
        raise InvalidBundle(f"missing bundle file: {path}")
    return path


def load_bundle(path: str | Path) -> GroundTruth:
    root = Path(path)
    if not root.is_dir():
        raise InvalidBundle(f"scene bundle directory not found: {root}")
    n = 0
    while (root / f"cam_{n}.json").exists():
        n += 1
    if n == 0:
        raise InvalidBundle(f"missing bundle file: {root / 'cam_0.json'}")
    cams, imgs, depths, monos = [], [], [], []
    for i in range(n):
        cams.append(Camera.load(_require(root / f"cam_{i}.json")))
        imgs.append(read_png(_require(root / f"rgb_{i}.png")))
        depths.append(read_pfm(_require(root / f"depth_{i}.pfm")))
        monos.append(read_pfm(_require(root / f"mono_{i}.pfm")))
    pts, normals = read_points_ply(_require(root / "gt_points.ply"))
    h_cams, h_imgs, h_depths = [], [], []
    held = root / "heldout"
    j = 0
    while (held / f"cam_{j}.json").exists():
        h_cams.append(Camera.load(held / f"cam_{j}.json"))
        h_imgs.append(read_png(_require(held / f"rgb_{j}.png")))
        h_depths.append(read_pfm(_require(held / f"depth_{j}.pfm")))
        j += 1
    spec = None
    if (root / "spec.json").exists():
        raw = json.loads((root / "spec.json").read_text())
        spec = SceneSpec.from_dict(raw) if raw else None
    for cam, img, depth, mono in zip(cams, imgs, depths, monos):
        if img.shape[:2] != cam.shape or depth.shape != cam.shape or mono.shape != cam.shape:
            raise InvalidBundle(f"{root}: image/depth sizes disagree with the camera")
    return GroundTruth(cams, imgs, depths, monos, pts, normals, h_cams, h_imgs, h_depths, spec)
