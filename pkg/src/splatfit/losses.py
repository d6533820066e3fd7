"""Training objectives: photometric, depth ranking/smoothing, feature
alignment, depth distortion and normal consistency, plus their weighted sum.

All functions take torch float64 tensors (numpy inputs are converted) and
return scalar tensors so autograd can differentiate them. Depth-dependent
terms ignore pixels whose accumulated blending weight is below
``COVERAGE_EPS``; per-pair and per-term sums are mean-normalized so the
weights do not depend on image resolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionMismatch
from .features import FeaturePyramid, in_frame, sample_feature_torch
from .gates import gate
from .geometry import Camera, pixel_centers, pixel_directions, project_points, project_points_torch
from .renderer import COVERAGE_EPS, Contribs, RenderBuffers, depth_to_normal

TIE_FRACTION = 1e-6
COS_EPS = 1e-12


@dataclass
class LossWeights:
    l1: float = 1.0     # depth ranking
    l2: float = 0.5     # depth smoothing
    l3: float = 0.2     # feature alignment
    l4: float = 1.0     # depth distortion
    l5: float = 0.05    # normal consistency
    ssim: float = 0.2   # D-SSIM share of the color loss
    margin: float = 1e-3
    edge: float = 0.01
    smooth_tol: float = 1e-3
    patch: int = 16
    levels: int = 3

    def __post_init__(self):
        if min(self.l1, self.l2, self.l3, self.l4, self.l5, self.ssim) < 0:
            raise ValueError("loss weights must be non-negative")
        if not (self.margin > 0 and self.edge > 0 and self.smooth_tol > 0):
            raise ValueError("margins must be positive")
        if self.patch < 2 or self.levels < 1:
            raise ValueError("patch side must be >= 2 and levels >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(2 ** i for i in range(self.levels))


@dataclass(frozen=True)
class PatchPermutation:
    row: int
    col: int
    side: int
    perm: np.ndarray  # bijection on range(side * side)

    def flat_indices(self, width: int) -> np.ndarray:
        r, c = np.divmod(np.arange(self.side * self.side), self.side)
        return (self.row + r) * width + (self.col + c)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _zero_like(*tensors) -> torch.Tensor:
    """A zero that still carries the graph of ``tensors`` (zero gradient)."""
    return sum((t.sum() * 0.0 for t in tensors), torch.zeros((), dtype=torch.float64))


# -- color ----------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM of two (H, W, 3) images over all fully-covered windows."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    c = a.shape[-1]
    win = _gaussian_window(size, sigma).expand(c, 1, size, size)
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    conv = lambda z: F.conv2d(z, win, groups=c)  # noqa: E731
    mx, my = conv(x), conv(y)
    sxx = conv(x * x) - mx * mx
    syy = conv(y * y) - my * my
    sxy = conv(x * y) - mx * my
    c1, c2 = k1 ** 2, k2 ** 2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return smap.mean()


def color_loss(rendered, target, lam: float = 0.2) -> torch.Tensor:
    rendered, target = _t(rendered), _t(target)
    if rendered.shape != target.shape:
        raise DimensionMismatch(f"{tuple(rendered.shape)} vs {tuple(target.shape)}")
    diff = rendered - target
    gate("color.sign", torch.sign(diff.detach()))
    return (1.0 - lam) * diff.abs().mean() + lam * (1.0 - ssim(rendered, target))


# -- intra-view depth consistency -----------------------------------------

def _ranking_terms(dh_j, dh_k, dm_j, dm_k, m, tie):
    order = torch.sign(dm_k - dm_j)
    gap = (dm_k - dm_j).abs()
    use = (gap >= tie) & (gap > 0)
    arg = order * (dh_j - dh_k) + m
    gate("ranking.use", use)
    gate("ranking.relu", (arg.detach() > 0) & use)
    return torch.relu(arg[use]), int(use.sum())


def ranking_loss(rendered, mono, perm, m: float) -> torch.Tensor:
    """Patch ranking loss for one flattened patch and its shuffle ``perm``.

    Pairs with (numerically) tied mono depth carry no ordering information
    and are skipped; the result is averaged over evaluated pairs.
    """
    dh = _t(rendered).reshape(-1)
    dm = _t(mono).reshape(-1)
    k = torch.as_tensor(perm.perm if isinstance(perm, PatchPermutation) else perm, dtype=torch.int64)
    tie = TIE_FRACTION * float(dm.max() - dm.min())
    terms, n = _ranking_terms(dh, dh[k], dm, dm[k], m, tie)
    return terms.sum() / n if n else _zero_like(dh)


def sample_permutations(height: int, width: int, side: int, rng: np.random.Generator) -> list[PatchPermutation]:
    """One fresh shuffle for every full ``side x side`` patch of the image."""
    perms = []
    for r in range(0, height - side + 1, side):
        for c in range(0, width - side + 1, side):
            perms.append(PatchPermutation(r, c, side, rng.permutation(side * side)))
    return perms


def ranking_loss_image(depth, mono, covered, perms: Sequence[PatchPermutation], m: float) -> torch.Tensor:
    dh = _t(depth)
    width = dh.shape[1]
    dh, dm = dh.reshape(-1), _t(mono).reshape(-1)
    cov = torch.as_tensor(np.asarray(covered)).reshape(-1)
    if not perms:
        return _zero_like(dh)
    j = np.concatenate([p.flat_indices(width) for p in perms])
    k = np.concatenate([p.flat_indices(width)[p.perm] for p in perms])
    both = (cov[j] & cov[k]).numpy()
    gate("ranking.covered", both)
    j, k = torch.as_tensor(j[both]), torch.as_tensor(k[both])
    tie = TIE_FRACTION * float(dm.max() - dm.min())
    terms, n = _ranking_terms(dh[j], dh[k], dm[j], dm[k], m, tie)
    return terms.sum() / n if n else _zero_like(dh)


def normalize_mono(mono) -> torch.Tensor:
    dm = _t(mono)
    lo, hi = dm.min(), dm.max()
    return (dm - lo) / (hi - lo) if float(hi - lo) > 0 else torch.zeros_like(dm)


def smoothing_loss(depth, mono, m_e: float, m_t: float, covered=None) -> torch.Tensor:
    """Edge-aware smoothing over right/down neighbor pairs."""
    dh, dm = _t(depth), _t(mono)
    if dh.shape != dm.shape:
        raise DimensionMismatch(f"{tuple(dh.shape)} vs {tuple(dm.shape)}")
    dm = normalize_mono(dm)
    cov = torch.ones_like(dh, dtype=torch.bool) if covered is None else torch.as_tensor(np.asarray(covered))
    terms, count = [], 0
    for sl_a, sl_b in (((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
                       ((slice(None, -1), slice(None)), (slice(1, None), slice(None)))):
        use = ((dm[sl_b] - dm[sl_a]).abs() < m_e) & cov[sl_a] & cov[sl_b]
        gate("smooth.use", use)
        diff = dh[sl_b] - dh[sl_a]
        arg = diff.abs() - m_t
        gate("smooth.sign", torch.sign(diff.detach()) * use)
        gate("smooth.relu", (arg.detach() > 0) & use)
        terms.append(torch.relu(arg[use]).sum())
        count += int(use.sum())
    return sum(terms) / count if count else _zero_like(dh)


# -- multi-view feature alignment -----------------------------------------

def visibility_mask(points, camera: Camera) -> np.ndarray:
    """Among points falling in the same source pixel, keep the nearest one."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    pix, z = project_points(camera, points)
    ok = (z > 1e-9) & in_frame(pix, camera.width, camera.height)
    idx = np.flatnonzero(ok)
    vis = np.zeros(len(points), dtype=bool)
    if len(idx) == 0:
        return vis
    cells = np.floor(pix[idx, 1]).astype(np.int64) * camera.width + np.floor(pix[idx, 0]).astype(np.int64)
    dist = np.linalg.norm(points[idx] - camera.center, axis=1)
    order = np.lexsort((idx, dist, cells))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cells[order][1:] != cells[order][:-1]
    vis[idx[order[first]]] = True
    return vis


@dataclass
class FeatureView:
    camera: Camera
    pyramid: FeaturePyramid

    def __post_init__(self):
        self._maps = self.pyramid.tensors()

    def map(self, scale: int) -> torch.Tensor:
        return self._maps[self.pyramid.scales.index(scale)]


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    den = a.norm(dim=-1) * b.norm(dim=-1)
    return (a * b).sum(-1) / torch.clamp(den, min=COS_EPS)


def feature_loss(reference: FeatureView, sources: Sequence[FeatureView], depth, covered,
                 scales: Sequence[int] = (1, 2, 4)) -> torch.Tensor:
    """Level-weighted cosine misalignment of depth-induced correspondences."""
    depth = _t(depth)
    cam = reference.camera
    cov = np.asarray(covered).reshape(-1)
    gate("feature.covered", cov)
    flat = np.flatnonzero(cov)
    if len(flat) == 0 or not sources:
        return _zero_like(depth)
    dirs = torch.as_tensor(pixel_directions(cam).reshape(-1, 3)[flat])
    p_ref = torch.as_tensor(pixel_centers(cam).reshape(-1, 2)[flat])
    x = torch.as_tensor(cam.center) + depth.reshape(-1)[flat][:, None] * dirs
    ref_feats = {l: sample_feature_torch(reference.map(l), l, p_ref) for l in scales}
    total = _zero_like(depth)
    count = 0
    for src in sources:
        vis = visibility_mask(x.detach().numpy(), src.camera)
        gate("feature.visible", vis)
        if not vis.any():
            continue
        sel = torch.as_tensor(np.flatnonzero(vis))
        p_src, _ = project_points_torch(src.camera, x[sel])
        for l in scales:
            cos = _cosine(ref_feats[l][sel], sample_feature_torch(src.map(l), l, p_src))
            gate("feature.abs", (1.0 - cos.detach()) >= 0)
            total = total + ((1.0 - cos).abs() / l).sum()
            count += len(sel)
    return total / count if count else total


# -- surface regularizers --------------------------------------------------

def distortion_loss(contribs: Contribs) -> torch.Tensor:
    """Mean over covered pixels of sum_{i,j} w_i w_j |d_i - d_j| (sorted hits)."""
    w, d = contribs.weights, contribs.depths
    if w.numel() == 0:
        return _zero_like(w)
    covered = w.detach().sum(1) >= COVERAGE_EPS
    gate("distortion.covered", covered)
    wd = w * d
    w_before = torch.cumsum(w, 1) - w
    wd_before = torch.cumsum(wd, 1) - wd
    per_pixel = 2.0 * (w * (d * w_before - wd_before)).sum(1)
    n = int(covered.sum())
    return per_pixel[covered].sum() / n if n else _zero_like(w)


def normal_loss(contribs: Contribs, depth_normals) -> torch.Tensor:
    """Mean over covered pixels with a valid depth normal of sum_i w_i (1 - n_i.N)."""
    w = contribs.weights
    if w.numel() == 0:
        return _zero_like(w)
    N = _t(depth_normals).reshape(-1, 3)[contribs.pixel]
    valid = (w.detach().sum(1) >= COVERAGE_EPS) & (N.detach().norm(dim=-1) > 0)
    gate("normal.rows", valid)
    dots = (contribs.normals * N[:, None, :]).sum(-1)
    per_pixel = (w * (1.0 - dots)).sum(1)
    n = int(valid.sum())
    return per_pixel[valid].sum() / n if n else _zero_like(w, N)


# -- combination -----------------------------------------------------------

TERMS = ("L_c", "L_r", "L_s", "L_f", "L_d", "L_n")


def total_loss(buffers: RenderBuffers, target, mono, weights: LossWeights, *, camera: Camera,
               perms: Sequence[PatchPermutation] = (), feature_ref: Optional[FeatureView] = None,
               feature_sources: Sequence[FeatureView] = (), feature_on: bool = True,
               ) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of every objective plus a per-term breakdown.

    Terms whose weight is zero (or the feature term while ``feature_on`` is
    false) are not evaluated and are reported as exactly 0.
    """
    covered = buffers.covered.numpy()
    zero = _zero_like(buffers.depth)
    terms = {k: zero for k in TERMS}
    terms["L_c"] = color_loss(buffers.color, target, weights.ssim)
    if weights.l1 > 0:
        terms["L_r"] = ranking_loss_image(buffers.depth, mono, covered, perms, weights.margin)
    if weights.l2 > 0:
        terms["L_s"] = smoothing_loss(buffers.depth, mono, weights.edge, weights.smooth_tol, covered)
    if weights.l3 > 0 and feature_on and feature_ref is not None:
        terms["L_f"] = feature_loss(feature_ref, feature_sources, buffers.depth, covered, weights.scales)
    if weights.l4 > 0:
        terms["L_d"] = distortion_loss(buffers.contribs)
    if weights.l5 > 0:
        terms["L_n"] = normal_loss(buffers.contribs, depth_to_normal(camera, buffers.depth))
    lam = {"L_r": weights.l1, "L_s": weights.l2, "L_f": weights.l3, "L_d": weights.l4, "L_n": weights.l5}
    total = terms["L_c"]
    for k, v in lam.items():
        total = total + v * terms[k]
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown
