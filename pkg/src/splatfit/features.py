"""Deterministic multi-level dense descriptors with bilinear sampling.

Each level of the pyramid is the image box-downsampled by a power of two,
described by eight channels (gray, three chroma offsets, Sobel x/y, gradient
magnitude and 5x5 contrast). Every channel is locally standardized over a
5x5 window, which removes additive brightness changes between views.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

N_CHANNELS = 8
WINDOW = 5
NORM_EPS = 1e-6


@dataclass(frozen=True)
class FeaturePyramid:
    scales: tuple[int, ...]
    maps: tuple[np.ndarray, ...]  # (H / l, W / l, C) per level
    width: int
    height: int

    def level(self, scale: int) -> np.ndarray:
        return self.maps[self.scales.index(scale)]

    def tensors(self) -> list[torch.Tensor]:
        return [torch.as_tensor(m) for m in self.maps]

    def dump_channel(self, scale: int, channel: int, path: str | Path) -> None:
        from .io import write_pfm

        write_pfm(path, self.level(scale)[..., channel])


def downsample2(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[0] // 2, image.shape[1] // 2
    im = image[: 2 * h, : 2 * w]
    return 0.25 * (im[0::2, 0::2] + im[1::2, 0::2] + im[0::2, 1::2] + im[1::2, 1::2])


def _local_mean(x: np.ndarray) -> np.ndarray:
    return ndimage.uniform_filter(x, size=WINDOW, mode="nearest")


def _local_std(x: np.ndarray) -> np.ndarray:
    mean = _local_mean(x)
    var = _local_mean(x * x) - mean * mean
    return np.sqrt(np.maximum(var, 0.0))


def raw_channels(image: np.ndarray) -> np.ndarray:
    """The eight un-normalized descriptor channels of one image level."""
    gray = image.mean(axis=-1)
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return np.stack(
        [
            gray,
            image[..., 0] - gray,
            image[..., 1] - gray,
            image[..., 2] - gray,
            gx,
            gy,
            np.hypot(gx, gy),
            _local_std(gray),
        ],
        axis=-1,
    )


def normalize_channels(raw: np.ndarray) -> np.ndarray:
    out = np.empty_like(raw)
    for c in range(raw.shape[-1]):
        ch = raw[..., c]
        out[..., c] = (ch - _local_mean(ch)) / (_local_std(ch) + NORM_EPS)
    return out


def build_pyramid(image: np.ndarray, n_levels: int = 3) -> FeaturePyramid:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) image")
    scales, maps = [], []
    level = image
    for i in range(n_levels):
        if i > 0:
            level = downsample2(level)
        if min(level.shape[:2]) < 1:
            break
        scales.append(2 ** i)
        maps.append(normalize_channels(raw_channels(level)))
    return FeaturePyramid(tuple(scales), tuple(maps), image.shape[1], image.shape[0])


def in_frame(p, width: int, height: int):
    return (p[..., 0] >= 0) & (p[..., 0] < width) & (p[..., 1] >= 0) & (p[..., 1] < height)


def sample_feature(pyramid: FeaturePyramid, scale: int, p) -> tuple[np.ndarray, bool]:
    """Bilinear sample at level-1 pixel coordinate ``p`` (centers at +0.5).

    Returns the descriptor and whether ``p`` lies inside the level-1 image.
    """
    fmap = pyramid.level(scale)
    h, w = fmap.shape[:2]
    qx = float(p[0]) / scale - 0.5
    qy = float(p[1]) / scale - 0.5
    x0, y0 = int(np.floor(qx)), int(np.floor(qy))
    fx, fy = qx - x0, qy - y0
    cx = lambda i: min(max(i, 0), w - 1)  # noqa: E731
    cy = lambda i: min(max(i, 0), h - 1)  # noqa: E731
    val = ((1 - fx) * (1 - fy) * fmap[cy(y0), cx(x0)] + fx * (1 - fy) * fmap[cy(y0), cx(x0 + 1)]
           + (1 - fx) * fy * fmap[cy(y0 + 1), cx(x0)] + fx * fy * fmap[cy(y0 + 1), cx(x0 + 1)])
    inside = 0 <= p[0] < pyramid.width and 0 <= p[1] < pyramid.height
    return val, bool(inside)


def sample_feature_torch(fmap: torch.Tensor, scale: int, p: torch.Tensor) -> torch.Tensor:
    """Differentiable batched version of :func:`sample_feature` (no frame flag)."""
    from .gates import gate

    h, w = fmap.shape[:2]
    q = p / scale - 0.5
    q0 = torch.floor(q.detach())
    gate(f"sample.cell{scale}", q0)
    f = q - q0
    x0 = q0[:, 0].long()
    y0 = q0[:, 1].long()
    x0c, x1c = x0.clamp(0, w - 1), (x0 + 1).clamp(0, w - 1)
    y0c, y1c = y0.clamp(0, h - 1), (y0 + 1).clamp(0, h - 1)
    fx, fy = f[:, :1], f[:, 1:]
    return ((1 - fx) * (1 - fy) * fmap[y0c, x0c] + fx * (1 - fy) * fmap[y0c, x1c]
            + (1 - fx) * fy * fmap[y1c, x0c] + fx * fy * fmap[y1c, x1c])
