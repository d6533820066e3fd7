"""Front-to-back compositing of surfels into color, depth and normal maps.

Every pixel gathers its exact ray-surfel intersections, sorts them by ray
depth and alpha-blends them. The differentiable path (:func:`render_view`)
is written with torch float64 ops so autograd supplies reverse-mode
gradients; :func:`composite_pixel` is an independent scalar version used
as a reference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .gates import gate
from .geometry import Camera, Ray, pixel_directions
from .splats import (
    CUTOFF_SQ,
    GRAZING_EPS,
    NEAR_CLIP,
    SplatSet,
    intersect_ray_splat,
    quat_to_rotmat,
    quat_to_rotmat_torch,
)

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
DEPTH_EPS = 1e-8
COVERAGE_EPS = 1e-6


@dataclass
class PixelRecord:
    color: np.ndarray
    depth: float
    normal: np.ndarray
    acc: float
    contribs: list  # (splat id, weight, depth, gaussian value), ascending depth


@dataclass
class Contribs:
    """Padded per-pixel contribution lists of the covered pixels.

    Row ``r`` describes pixel ``pixel[r]`` (flat index ``y * W + x``); column
    ``k`` is its ``k``-th hit in depth order. Padding has ``ids == -1`` and
    zero weight.
    """

    pixel: torch.Tensor
    ids: torch.Tensor
    weights: torch.Tensor
    depths: torch.Tensor
    gvals: torch.Tensor
    normals: torch.Tensor

    def records(self, flat_pixel: int) -> list[tuple[int, float, float, float]]:
        rows = (self.pixel == flat_pixel).nonzero()
        if len(rows) == 0:
            return []
        r = int(rows[0])
        keep = self.ids[r] >= 0
        return [
            (int(i), float(w), float(d), float(g))
            for i, w, d, g in zip(self.ids[r][keep], self.weights[r][keep].detach(),
                                  self.depths[r][keep].detach(), self.gvals[r][keep].detach())
        ]


@dataclass
class RenderBuffers:
    color: torch.Tensor   # (H, W, 3)
    depth: torch.Tensor   # (H, W), ray-parameter depth
    normal: torch.Tensor  # (H, W, 3), camera-facing, unit or zero
    acc: torch.Tensor     # (H, W), sum of blending weights
    contribs: Contribs

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).detach().cpu().numpy() for k in ("color", "depth", "normal", "acc")}

    @property
    def covered(self) -> torch.Tensor:
        return self.acc.detach() >= COVERAGE_EPS


# -- scalar reference -------------------------------------------------------

def composite_pixel(ray: Ray, splats: SplatSet, background=(0.0, 0.0, 0.0)) -> PixelRecord:
    hits = []
    for i in range(len(splats)):
        s = splats[i]
        hit = intersect_ray_splat(ray, s)
        if hit is None:
            continue
        alpha = s.opacity * hit.gaussian_value
        if alpha < ALPHA_MIN:
            continue
        n = s.rotation[:, 2]
        if n @ ray.direction > 0:
            n = -n
        hits.append((hit.depth, i, alpha, hit.gaussian_value, s.color, n))
    hits.sort(key=lambda h: (h[0], h[1]))
    color = np.zeros(3)
    normal = np.zeros(3)
    trans, acc, wd = 1.0, 0.0, 0.0
    contribs = []
    for d, i, alpha, g, c, n in hits:
        if trans < T_MIN:
            break
        w = alpha * trans
        color += w * c
        normal += w * n
        acc += w
        wd += w * d
        contribs.append((i, w, d, g))
        trans *= 1.0 - alpha
    color += (1.0 - acc) * np.asarray(background, dtype=np.float64)
    norm = np.linalg.norm(normal)
    normal = normal / norm if acc >= COVERAGE_EPS and norm > 0 else np.zeros(3)
    return PixelRecord(color, wd / (acc + DEPTH_EPS), normal, acc, contribs)


# -- vectorized differentiable renderer -------------------------------------

def _candidate_pairs(camera: Camera, mu: np.ndarray, rot: np.ndarray, scales: np.ndarray):
    """Conservative (splat, pixel) candidates from projected 3-sigma quads."""
    n = len(mu)
    if n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    signs = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64) * 3.0
    offs = (signs[None, :, 0, None] * (scales[:, 0, None] * rot[:, :, 0])[:, None, :]
            + signs[None, :, 1, None] * (scales[:, 1, None] * rot[:, :, 1])[:, None, :])
    with np.errstate(over="ignore", invalid="ignore"):
        xc = camera.world_to_camera(mu[:, None, :] + offs)
    z = xc[..., 2]
    front = z > 1e-6
    all_front = front.all(axis=1)
    # corners of astronomically large or distant splats overflow; cull them
    keep = ~(z <= 1e-12).all(axis=1) & np.isfinite(xc).all(axis=(1, 2))
    safe_z = np.where(front, z, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        px = np.nan_to_num(camera.fx * xc[..., 0] / safe_z + camera.cx)
        py = np.nan_to_num(camera.fy * xc[..., 1] / safe_z + camera.cy)
    W, H = camera.width, camera.height
    x0 = np.where(all_front, np.ceil(px.min(1) - 0.5), 0)
    x1 = np.where(all_front, np.floor(px.max(1) - 0.5), W - 1)
    y0 = np.where(all_front, np.ceil(py.min(1) - 0.5), 0)
    y1 = np.where(all_front, np.floor(py.max(1) - 0.5), H - 1)
    x0 = np.clip(x0, 0, W).astype(np.int64)
    y0 = np.clip(y0, 0, H).astype(np.int64)
    x1 = np.clip(x1, -1, W - 1).astype(np.int64)
    y1 = np.clip(y1, -1, H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = np.where(keep, nx * ny, 0)
    total = int(counts.sum())
    sid = np.repeat(np.arange(n), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    px_i = np.repeat(x0, counts) + local % np.maximum(nxr, 1)
    py_i = np.repeat(y0, counts) + local // np.maximum(nxr, 1)
    return sid, py_i * W + px_i


def _intersect(origin, d, mu, rot, scales):
    """Ray/tangent-plane hits; returns (n.d, ray depth, u^2+v^2, gaussian)."""
    nrm = rot[:, :, 2]
    denom = (nrm * d).sum(-1)
    safe = torch.where(denom.detach().abs() >= GRAZING_EPS, denom, torch.ones_like(denom))
    t = (nrm * (mu - origin)).sum(-1) / safe
    rel = origin + t[:, None] * d - mu
    u = (rot[:, :, 0] * rel).sum(-1) / scales[:, 0]
    v = (rot[:, :, 1] * rel).sum(-1) / scales[:, 1]
    r2 = u * u + v * v
    return denom, t, r2, torch.exp(-0.5 * r2)


def _as_tensors(splats) -> Mapping[str, torch.Tensor]:
    if isinstance(splats, SplatSet):
        return splats.tensors()
    return splats


def render_view(camera: Camera, splats, background=(0.0, 0.0, 0.0)) -> RenderBuffers:
    """Render ``splats`` (a :class:`SplatSet` or dict of tensors) from ``camera``."""
    p = _as_tensors(splats)
    dtype = torch.float64
    H, W = camera.height, camera.width
    mu, quat, log_scales = p["mu"], p["quat"], p["log_scales"]
    with torch.no_grad():
        rot_np = quat_to_rotmat(quat.detach().numpy()) if len(mu) else np.zeros((0, 3, 3))
        sid_np, pix_np = _candidate_pairs(camera, mu.detach().numpy(), rot_np,
                                          np.exp(log_scales.detach().numpy()))
    dirs_all = torch.as_tensor(pixel_directions(camera).reshape(-1, 3), dtype=dtype)
    origin = torch.as_tensor(camera.center, dtype=dtype)

    rot = quat_to_rotmat_torch(quat)
    scales = torch.exp(log_scales)
    opacity = torch.sigmoid(p["opacity_logit"])

    dirs_np = dirs_all.numpy()
    with torch.no_grad():
        sid_c, pix_c = torch.as_tensor(sid_np), torch.as_tensor(pix_np)
        denom_c, t_c, r2_c, g_c = _intersect(origin, dirs_all[pix_c], mu[sid_c], rot[sid_c], scales[sid_c])
        alpha_c = opacity[sid_c] * g_c
        keep = ((denom_c.abs() >= GRAZING_EPS) & (t_c > NEAR_CLIP) & (r2_c <= CUTOFF_SQ)
                & (alpha_c >= ALPHA_MIN)).numpy()
    sid_k, pix_k = sid_np[keep], pix_np[keep]
    order = np.lexsort((sid_k, t_c.numpy()[keep], pix_k))
    sid_s, pix_s = sid_k[order], pix_k[order]
    gate("render.pairs", np.stack([pix_s, sid_s]))

    sid = torch.as_tensor(sid_s)
    denom, t, _, g = _intersect(origin, torch.as_tensor(dirs_np[pix_s]), mu[sid], rot[sid], scales[sid])
    alpha = opacity[sid] * g

    uniq, row_np = np.unique(pix_s, return_inverse=True)
    rank_np = np.arange(len(pix_s)) - np.searchsorted(pix_s, pix_s, side="left")
    P = len(uniq)
    K = int(rank_np.max()) + 1 if len(rank_np) else 1
    row, rank = torch.as_tensor(row_np.reshape(-1)), torch.as_tensor(rank_np)

    def pad(values, trailing=()):
        return torch.zeros((P, K) + trailing, dtype=dtype).index_put((row, rank), values)

    alpha_pad = pad(alpha)
    depth_pad = pad(t)
    g_pad = pad(g)
    color_pad = pad(p["color"][sid], (3,))
    facing = torch.where(denom.detach() > 0, -1.0, 1.0).to(dtype)
    gate("render.facing", facing > 0)
    normal_pad = pad(rot[sid, :, 2] * facing[:, None], (3,))
    ids_pad = torch.full((P, K), -1, dtype=torch.int64).index_put((row, rank), sid)

    trans = torch.cumprod(1.0 - alpha_pad, dim=1)
    trans_excl = torch.cat([torch.ones((P, 1), dtype=dtype), trans[:, :-1]], dim=1)
    alive = trans_excl.detach() >= T_MIN
    gate("render.alive", alive)
    w = alpha_pad * trans_excl * alive
    ids_pad = torch.where(alive, ids_pad, torch.full_like(ids_pad, -1))

    acc_r = w.sum(1)
    color_r = (w[..., None] * color_pad).sum(1)
    depth_r = (w * depth_pad).sum(1) / (acc_r + DEPTH_EPS)
    nsum = (w[..., None] * normal_pad).sum(1)
    nnorm = nsum.norm(dim=-1)
    has_n = (acc_r.detach() >= COVERAGE_EPS) & (nnorm.detach() > 0)
    normal_r = torch.where(has_n[:, None], nsum / torch.where(has_n, nnorm, torch.ones_like(nnorm))[:, None],
                           torch.zeros_like(nsum))

    pix_rows = torch.as_tensor(uniq)
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype)
    acc = torch.zeros(H * W, dtype=dtype).index_put((pix_rows,), acc_r)
    color = torch.zeros((H * W, 3), dtype=dtype).index_put((pix_rows,), color_r)
    color = color + (1.0 - acc)[:, None] * bg
    depth = torch.zeros(H * W, dtype=dtype).index_put((pix_rows,), depth_r)
    normal = torch.zeros((H * W, 3), dtype=dtype).index_put((pix_rows,), normal_r)

    contribs = Contribs(pix_rows, ids_pad, w, depth_pad, g_pad, normal_pad)
    return RenderBuffers(color.reshape(H, W, 3), depth.reshape(H, W), normal.reshape(H, W, 3),
                         acc.reshape(H, W), contribs)


def depth_to_normal(camera: Camera, depth):
    """Camera-facing normals from a ray-depth map via forward differences.

    Accepts a numpy array (returns numpy) or a torch tensor (differentiable).
    Pixels on the last row/column, or whose +x/+y neighbor has zero depth,
    get a zero normal.
    """
    as_numpy = not isinstance(depth, torch.Tensor)
    D = torch.as_tensor(np.asarray(depth, dtype=np.float64)) if as_numpy else depth
    dirs = torch.as_tensor(pixel_directions(camera), dtype=D.dtype)
    origin = torch.as_tensor(camera.center, dtype=D.dtype)
    pts = origin + D[..., None] * dirs
    dx = pts[:-1, 1:] - pts[:-1, :-1]
    dy = pts[1:, :-1] - pts[:-1, :-1]
    n = torch.cross(dx, dy, dim=-1)
    valid = (D[:-1, :-1] > 0) & (D[:-1, 1:] > 0) & (D[1:, :-1] > 0)
    valid = valid.detach()
    to_cam = origin - pts[:-1, :-1]
    flip = ((n * to_cam).sum(-1) < 0).detach()
    gate("normal.flip", flip & valid)
    n = torch.where(flip[..., None], -n, n)
    nn_ = n.norm(dim=-1)
    valid = valid & (nn_.detach() > 0)
    n = torch.where(valid[..., None], n / torch.where(valid, nn_, torch.ones_like(nn_))[..., None],
                    torch.zeros_like(n))
    out = torch.zeros(D.shape + (3,), dtype=D.dtype)
    out = torch.cat([torch.cat([n, torch.zeros_like(n[:, :1])], 1),
                     torch.zeros_like(out[:1])], 0)
    gate("normal.valid", valid)
    return out.numpy() if as_numpy else out
