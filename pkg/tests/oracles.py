"""Slow, obviously-correct reference implementations used by the tests.

Nothing here imports the package's vectorized code paths; each function is
written from the defining formula with plain loops.
"""
from __future__ import annotations

import math

import numpy as np


# -- geometry ----------------------------------------------------------------

def project(K, c2w, x):
    """Pinhole projection from the textbook formula."""
    rot, t = np.asarray(c2w)[:, :3], np.asarray(c2w)[:, 3]
    xc = rot.T @ (np.asarray(x, dtype=float) - t)
    uvw = np.asarray(K) @ xc
    return uvw[:2] / uvw[2], xc[2]


def ray_sphere_depth(origin, direction, center, radius):
    """Nearest positive ray parameter hitting a sphere, or 0 on a miss."""
    oc = np.asarray(origin, float) - np.asarray(center, float)
    b = float(np.dot(direction, oc))
    c = float(np.dot(oc, oc)) - radius * radius
    disc = b * b - c
    if disc < 0:
        return 0.0
    t = -b - math.sqrt(disc)
    return t if t > 0 else 0.0


def sphere_depth_map(camera, center, radius):
    out = np.zeros((camera.height, camera.width))
    for j in range(camera.height):
        for i in range(camera.width):
            d_cam = np.array([(i + 0.5 - camera.cx) / camera.fx, (j + 0.5 - camera.cy) / camera.fy, 1.0])
            d = camera.rotation @ d_cam
            d /= np.linalg.norm(d)
            out[j, i] = ray_sphere_depth(camera.center, d, center, radius)
    return out


# -- compositing -------------------------------------------------------------

def composite(alphas, depths, colors, t_min=1e-4):
    """Front-to-back blend of already-sorted hits; returns (weights, color, depth)."""
    trans = 1.0
    weights = []
    for a in alphas:
        if trans < t_min:
            weights.append(0.0)
            continue
        weights.append(a * trans)
        trans *= 1.0 - a
    w = np.array(weights)
    color = (w[:, None] * np.asarray(colors)).sum(0) if len(w) else np.zeros(3)
    depth = float((w * np.asarray(depths)).sum() / (w.sum() + 1e-8)) if len(w) else 0.0
    return w, color, depth


# -- losses ------------------------------------------------------------------

def ranking_loss(rendered, mono, perm, margin, tie_fraction=1e-6):
    """Pairwise ranking hinge over (j, perm[j]) with the tie rule."""
    dh = np.ravel(rendered)
    dm = np.ravel(mono)
    tie = tie_fraction * (dm.max() - dm.min())
    total, n = 0.0, 0
    for j in range(len(dh)):
        k = perm[j]
        diff = dm[j] - dm[k]
        if abs(diff) < tie:
            continue
        sign = 1.0 if diff > 0 else -1.0
        total += max(0.0, -sign * (dh[j] - dh[k]) + margin)
        n += 1
    return total / n if n else 0.0


def smoothing_loss(depth, mono, m_e, m_t, covered=None):
    dh = np.asarray(depth, float)
    dm = np.asarray(mono, float)
    lo, hi = dm.min(), dm.max()
    dm = (dm - lo) / (hi - lo) if hi > lo else np.zeros_like(dm)
    cov = np.ones_like(dh, bool) if covered is None else np.asarray(covered, bool)
    H, W = dh.shape
    total, n = 0.0, 0
    for y in range(H):
        for x in range(W):
            for dy, dx in ((0, 1), (1, 0)):
                y2, x2 = y + dy, x + dx
                if y2 >= H or x2 >= W or not (cov[y, x] and cov[y2, x2]):
                    continue
                if abs(dm[y2, x2] - dm[y, x]) < m_e:
                    total += max(0.0, abs(dh[y2, x2] - dh[y, x]) - m_t)
                    n += 1
    return total / n if n else 0.0


def distortion(weights, depths):
    total = 0.0
    for i in range(len(weights)):
        for j in range(len(weights)):
            total += weights[i] * weights[j] * abs(depths[i] - depths[j])
    return total


def visibility(points, camera):
    """O(n^2) grouping: a point is visible iff no other point in its source
    pixel is strictly nearer (ties broken by lower index)."""
    n = len(points)
    keys = []
    for p in points:
        pix, z = project(camera.K, camera.c2w, p)
        if z <= 1e-9 or not (0 <= pix[0] < camera.width and 0 <= pix[1] < camera.height):
            keys.append(None)
        else:
            keys.append((int(math.floor(pix[1])), int(math.floor(pix[0])), float(np.linalg.norm(p - camera.center))))
    vis = np.zeros(n, bool)
    for i in range(n):
        if keys[i] is None:
            continue
        best = True
        for j in range(n):
            if j == i or keys[j] is None or keys[j][:2] != keys[i][:2]:
                continue
            if keys[j][2] < keys[i][2] or (keys[j][2] == keys[i][2] and j < i):
                best = False
                break
        vis[i] = best
    return vis


# -- metrics -----------------------------------------------------------------

def chamfer(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    acc = np.mean([min(np.linalg.norm(p - q) for q in b) for p in a])
    comp = np.mean([min(np.linalg.norm(q - p) for p in a) for q in b])
    return acc, comp, 0.5 * (acc + comp)


def depth_metrics(pred, gt, unit, thresholds=(1, 2, 4)):
    errs, rels = [], []
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p > 0 and g > 0:
            errs.append(abs(p - g))
            rels.append(abs(p - g) / g)
    out = {f"pct{t}": 100.0 * sum(e < t * unit for e in errs) / len(errs) for t in thresholds}
    out["abs"] = sum(errs) / len(errs)
    out["rel"] = sum(rels) / len(rels)
    return out


# -- optimizer ---------------------------------------------------------------

def adam_scalar(grad_fn, x0, lr, steps, b1=0.9, b2=0.999, eps=1e-15):
    x, m, v = float(x0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def bilinear(fmap, qx, qy):
    """Border-clamped bilinear lookup at continuous texel coordinates."""
    h, w = fmap.shape[:2]
    x0, y0 = math.floor(qx), math.floor(qy)
    out = 0.0
    for dy in (0, 1):
        for dx in (0, 1):
            wx = (qx - x0) if dx else (1 - (qx - x0))
            wy = (qy - y0) if dy else (1 - (qy - y0))
            yy = min(max(y0 + dy, 0), h - 1)
            xx = min(max(x0 + dx, 0), w - 1)
            out = out + wx * wy * fmap[yy, xx]
    return out
