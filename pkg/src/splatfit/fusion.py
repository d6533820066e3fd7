"""TSDF depth fusion, marching-cubes extraction and reconstruction metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from ._mc_tables import EDGE_CORNERS, TRI_TABLE
from .errors import EmptyPointSet, EmptySurface, NoOverlap
from .geometry import Camera, project_points

COVERAGE_GATE = 0.5
CORNER_OFFSETS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.int64)


def _padded_table() -> np.ndarray:
    table = np.full((256, 16), -1, dtype=np.int64)
    for case, tris in enumerate(TRI_TABLE):
        table[case, : len(tris)] = tris
    return table


_TABLE = _padded_table()
_EDGE_A = np.array([a for a, _ in EDGE_CORNERS])
_EDGE_B = np.array([b for _, b in EDGE_CORNERS])


@dataclass
class TsdfVolume:
    """Voxel grid of normalized truncated signed distances and weights.

    Values are stored divided by the truncation distance, so they lie in
    ``[-1, 1]``. Sample ``(i, j, k)`` sits at ``origin + voxel * (i, j, k)``.
    """

    origin: np.ndarray
    voxel: float
    dims: tuple
    trunc: float
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel <= 0:
            raise ValueError("voxel size must be positive")
        if self.trunc < 2 * self.voxel:
            raise ValueError("truncation must be at least two voxels")
        if min(self.dims) < 2:
            raise ValueError("volume needs at least 2 samples per axis")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float64)

    @classmethod
    def around_unit_sphere(cls, voxel: float = 0.01, trunc: float = 0.03, radius: float = 1.0) -> "TsdfVolume":
        half = radius + 3 * trunc
        n = int(np.ceil(2 * half / voxel)) + 1
        return cls(np.full(3, -half), voxel, (n, n, n), trunc)

    def coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.voxel * np.arange(self.dims[axis])

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel, self.dims, self.trunc, self.tsdf.copy(), self.weight.copy())


def integrate_depth(volume: TsdfVolume, camera: Camera, depth, mask=None, slab: int = 8) -> TsdfVolume:
    """Fuse one ray-parameter depth map into ``volume`` in place.

    Each voxel looks up the pixel containing its projection. The signed
    distance is the pixel depth minus the voxel's distance to the camera,
    clamped to the truncation band; voxels more than one band behind the
    surface are left alone. Uncovered pixels (``mask`` false or depth <= 0)
    contribute nothing.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (camera.height, camera.width):
        raise ValueError(f"depth shape {depth.shape} does not match the camera")
    valid_pix = depth > 0
    if mask is not None:
        valid_pix &= np.asarray(mask, dtype=bool)
    if not valid_pix.any():
        return volume
    ys, zs = volume.coords(1), volume.coords(2)
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    W, H = camera.width, camera.height
    for i0 in range(0, volume.dims[0], slab):
        xs = volume.coords(0)[i0: i0 + slab]
        pts = np.stack(np.broadcast_arrays(xs[:, None, None], yy[None], zz[None]), axis=-1).reshape(-1, 3)
        pix, z = project_points(camera, pts)
        ok = z > 1e-9
        col = np.floor(np.where(ok, pix[:, 0], -1.0))
        row = np.floor(np.where(ok, pix[:, 1], -1.0))
        ok &= (col >= 0) & (col < W) & (row >= 0) & (row < H)
        idx = np.flatnonzero(ok)
        r, c = row[idx].astype(np.int64), col[idx].astype(np.int64)
        hit = valid_pix[r, c]
        idx, r, c = idx[hit], r[hit], c[hit]
        sdf = depth[r, c] - np.linalg.norm(pts[idx] - camera.center, axis=1)
        near = sdf >= -volume.trunc
        idx, sdf = idx[near], sdf[near]
        value = np.clip(sdf / volume.trunc, -1.0, 1.0)
        tsdf = volume.tsdf[i0: i0 + slab].reshape(-1)
        weight = volume.weight[i0: i0 + slab].reshape(-1)
        w_old = weight[idx]
        tsdf[idx] = (tsdf[idx] * w_old + value) / (w_old + 1.0)
        weight[idx] = w_old + 1.0
    return volume


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.isfinite(self.vertices).all():
            raise ValueError("mesh vertices must be finite")

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_counts(self) -> dict:
        """Number of triangles incident to each undirected edge."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(k): int(v) for k, v in zip(uniq, counts)}

    def is_watertight(self) -> bool:
        return bool(len(self.triangles)) and all(v == 2 for v in self.edge_counts().values())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` points distributed uniformly over the surface area."""
        areas = self.triangle_areas()
        total = areas.sum()
        if total <= 0:
            raise EmptySurface("mesh has zero area")
        tri = rng.choice(len(areas), size=n, p=areas / total)
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        a, b, c = (self.vertices[self.triangles[tri, i]] for i in range(3))
        return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Marching cubes on the zero level set, restricted to fully observed cells.

    Vertices live on grid edges and are shared between neighbouring cells,
    so closed surfaces come out edge-manifold.
    """
    v, w = volume.tsdf, volume.weight
    nx, ny, nz = volume.dims
    cx, cy, cz = nx - 1, ny - 1, nz - 1
    inside = v < 0
    case = np.zeros((cx, cy, cz), dtype=np.int64)
    observed = np.ones((cx, cy, cz), dtype=bool)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        sl = (slice(dx, dx + cx), slice(dy, dy + cy), slice(dz, dz + cz))
        case |= inside[sl].astype(np.int64) << bit
        observed &= w[sl] > 0
    active = observed & (case != 0) & (case != 255)
    cells = np.argwhere(active)
    if len(cells) == 0:
        raise EmptySurface("no zero crossing among observed voxels")
    tri_edges = _TABLE[case[active]]  # (M, 16)
    m_idx, slot = np.nonzero(tri_edges >= 0)
    edges = tri_edges[m_idx, slot]
    # global edge id: (axis, lower grid point)
    ca = CORNER_OFFSETS[_EDGE_A[edges]]
    cb = CORNER_OFFSETS[_EDGE_B[edges]]
    lower = cells[m_idx] + np.minimum(ca, cb)
    axis = np.argmax(np.abs(cb - ca), axis=1)
    gid = ((axis * nx + lower[:, 0]) * ny + lower[:, 1]) * nz + lower[:, 2]
    uniq, inverse = np.unique(gid, return_inverse=True)
    first = np.zeros(len(uniq), dtype=np.int64)
    first[inverse[::-1]] = np.arange(len(gid))[::-1]
    p0 = lower[first]
    p1 = p0.copy()
    p1[np.arange(len(first)), axis[first]] += 1
    v0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    frac = v0 / (v0 - v1)
    verts = volume.origin + volume.voxel * (p0 + frac[:, None] * (p1 - p0))
    tris = inverse.reshape(-1, 3)
    return TriangleMesh(verts, tris)


def sdf_volume(fn, volume: TsdfVolume) -> TsdfVolume:
    """Fill ``volume`` with a truncated analytic signed distance (unit weights)."""
    grids = np.meshgrid(volume.coords(0), volume.coords(1), volume.coords(2), indexing="ij")
    pts = np.stack(grids, axis=-1).reshape(-1, 3)
    vals = np.asarray(fn(pts), dtype=np.float64).reshape(volume.dims)
    volume.tsdf = np.clip(vals / volume.trunc, -1.0, 1.0)
    volume.weight = np.ones(volume.dims)
    return volume


# -- metrics -----------------------------------------------------------------

def chamfer_distance(pred, gt) -> tuple[float, float, float]:
    """(accuracy, completeness, mean of the two) with exact nearest neighbours."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyPointSet("chamfer distance needs two non-empty point sets")
    acc = float(cKDTree(gt).query(pred, k=1)[0].mean())
    comp = float(cKDTree(pred).query(gt, k=1)[0].mean())
    return acc, comp, (acc + comp) / 2.0


def depth_metrics(pred, gt, unit: float, thresholds: Sequence[float] = (1, 2, 4)) -> dict:
    """Threshold percentages (strict ``<``) and absolute / relative error.

    Only pixels covered in both maps (depth > 0) are scored.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    both = (pred > 0) & (gt > 0) & np.isfinite(pred) & np.isfinite(gt)
    if not both.any():
        raise NoOverlap("prediction and ground truth share no covered pixel")
    err = np.abs(pred[both] - gt[both])
    out = {f"pct{t:g}": float(100.0 * np.mean(err < t * unit)) for t in thresholds}
    out["abs"] = float(err.mean())
    out["rel"] = float(np.mean(err / gt[both]))
    return out


def pooled_depth_metrics(preds, gts, unit: float, thresholds: Sequence[float] = (1, 2, 4)) -> dict:
    """:func:`depth_metrics` over the union of pixels of several views."""
    return depth_metrics(np.concatenate([np.ravel(p) for p in preds]),
                         np.concatenate([np.ravel(g) for g in gts]), unit, thresholds)


def observed_points(points, cameras: Sequence[Camera], depths, tol: float) -> np.ndarray:
    """Mask of points seen by at least one view (depth test within ``tol``)."""
    points = np.asarray(points, dtype=np.float64)
    seen = np.zeros(len(points), dtype=bool)
    for cam, depth in zip(cameras, depths):
        pix, z = project_points(cam, points)
        ok = (z > 1e-9) & (pix[:, 0] >= 0) & (pix[:, 0] < cam.width) & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height)
        idx = np.flatnonzero(ok)
        d = np.asarray(depth)[pix[idx, 1].astype(np.int64), pix[idx, 0].astype(np.int64)]
        dist = np.linalg.norm(points[idx] - cam.center, axis=1)
        seen[idx[(d > 0) & (np.abs(d - dist) < tol)]] = True
    return seen


def fuse_depths(cameras: Sequence[Camera], depths, masks=None, voxel: float = 0.01,
                trunc: float = 0.03) -> TsdfVolume:
    vol = TsdfVolume.around_unit_sphere(voxel, trunc)
    masks = masks if masks is not None else [None] * len(cameras)
    for cam, depth, mask in zip(cameras, depths, masks):
        integrate_depth(vol, cam, depth, mask)
    return vol


@dataclass
class Reconstruction:
    mesh: TriangleMesh
    metrics: dict
    volume: TsdfVolume


def render_depths(splats, cameras: Sequence[Camera], gate: float = COVERAGE_GATE):
    """Rendered depth maps with pixels below the coverage gate zeroed."""
    import torch

    from .renderer import render_view

    out = []
    with torch.no_grad():
        for cam in cameras:
            buf = render_view(cam, splats).numpy()
            out.append(np.where(buf["acc"] >= gate, buf["depth"], 0.0))
    return out


def reconstruct(splats, gt, voxel: float = 0.01, trunc: float = 0.03, n_samples: int = 100_000,
                seed: int = 0, gate: float = COVERAGE_GATE) -> Reconstruction:
    """Fuse rendered training depths, mesh them and score against ground truth.

    Chamfer distance uses the ground-truth points observed by the training
    views; depth metrics pool the held-out views (training views when the
    bundle has none), in units of ``voxel``.
    """
    from .synth import rng_for

    depths = render_depths(splats, gt.cameras, gate)
    vol = fuse_depths(gt.cameras, depths, voxel=voxel, trunc=trunc)
    mesh = extract_mesh(vol)
    samples = mesh.sample(n_samples, rng_for(seed, "mesh-samples"))
    seen = observed_points(gt.points, gt.cameras, gt.depths, tol=2 * voxel)
    reference = gt.points[seen] if seen.any() else gt.points
    acc, comp, cd = chamfer_distance(samples, reference)
    eval_cams = gt.heldout_cameras or gt.cameras
    eval_gt = gt.heldout_depths or gt.depths
    pred = render_depths(splats, eval_cams, gate)
    metrics = {"accuracy": acc, "completeness": comp, "chamfer": cd,
               "depth": pooled_depth_metrics(pred, eval_gt, voxel)}
    return Reconstruction(mesh, metrics, vol)
