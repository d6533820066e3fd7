"""Training loop, Adam updates and the finite-difference gradient audit."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import InsufficientViews, NonFiniteGradient
from .features import build_pyramid
from .gates import record_gates
from .losses import (
    FeatureView,
    LossWeights,
    color_loss,
    distortion_loss,
    feature_loss,
    normal_loss,
    ranking_loss_image,
    sample_permutations,
    smoothing_loss,
    total_loss,
)
from .renderer import depth_to_normal, render_view
from .splats import SplatSet, save_splats_ply
from .synth import GroundTruth, init_splats, rng_for

log = logging.getLogger(__name__)

GROUPS = {"mu": "position", "quat": "rotation", "log_scales": "scale", "opacity_logit": "opacity", "color": "color"}
LOG_SCALE_MIN = float(np.log(1e-4))
LOG_SCALE_MAX = 0.0


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: dict = field(default_factory=lambda: {
        "position": 1.6e-4, "rotation": 1e-3, "scale": 5e-3, "opacity": 5e-2, "color": 2.5e-3})
    scene_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    weights: LossWeights = field(default_factory=LossWeights)
    feature_start: int = 500
    n_splats: int = 5000
    init_noise: float = 0.02
    init_mode: str = "surface-sample"
    full_batch: bool = False
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        missing = set(GROUPS.values()) - set(self.lr)
        if missing:
            raise ValueError(f"missing learning rates for {sorted(missing)}")
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")

    def group_lr(self, group: str) -> float:
        lr = float(self.lr[group])
        return lr * self.scene_scale if group == "position" else lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "lr" in d:
            d["lr"] = {**cls().lr, **d["lr"]}
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights.from_dict({**LossWeights().to_dict(), **d["weights"]})
        return cls(**d)

    def serialize(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def step(splats: SplatSet, grads: dict, state: OptimizerState, config: TrainConfig) -> tuple[SplatSet, OptimizerState]:
    """One bias-corrected Adam update per parameter group, then projection.

    Quaternions are renormalized, log-scales clamped to ``[ln 1e-4, 0]`` and
    colors clipped to ``[0, 1]``.
    """
    for name in SplatSet.FIELDS:
        g = grads[name]
        if g.shape != getattr(splats, name).shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name}")
        bad = ~np.isfinite(g)
        if bad.any():
            raise NonFiniteGradient(name, int(np.argwhere(bad)[0][0]))
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    out = {}
    for name in SplatSet.FIELDS:
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(g)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(g)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        with np.errstate(over="ignore", invalid="ignore"):
            out[name] = getattr(splats, name) - config.group_lr(GROUPS[name]) * m_hat / (np.sqrt(v_hat) + config.eps)
    out["quat"] = out["quat"] / np.linalg.norm(out["quat"], axis=1, keepdims=True)
    out["log_scales"] = np.clip(out["log_scales"], LOG_SCALE_MIN, LOG_SCALE_MAX)
    out["color"] = np.clip(out["color"], 0.0, 1.0)
    for name in SplatSet.FIELDS:
        # an overflowing update is reported like the gradient that caused it
        bad = ~np.isfinite(out[name])
        if bad.any():
            raise NonFiniteGradient(name, int(np.argwhere(bad)[0][0]))
    state.step = t
    return SplatSet(**out), state


def configure_torch(deterministic: bool = True, threads: Optional[int] = None) -> None:
    if threads:
        torch.set_num_threads(int(threads))
    torch.use_deterministic_algorithms(bool(deterministic))


class _Views:
    """Per-view tensors shared by training and gradient checks."""

    def __init__(self, gt: GroundTruth, levels: int):
        self.cameras = gt.cameras
        self.targets = [torch.as_tensor(im) for im in gt.images]
        self.monos = [torch.as_tensor(m) for m in gt.monos]
        self.features = [FeatureView(c, build_pyramid(im, levels)) for c, im in zip(gt.cameras, gt.images)]

    def sources(self, i: int) -> list[FeatureView]:
        return [f for j, f in enumerate(self.features) if j != i]


def _view_loss(views: _Views, i: int, tensors: dict, weights: LossWeights, perms, feature_on: bool):
    cam = views.cameras[i]
    buffers = render_view(cam, tensors)
    return total_loss(buffers, views.targets[i], views.monos[i], weights, camera=cam, perms=perms,
                      feature_ref=views.features[i], feature_sources=views.sources(i), feature_on=feature_on)


def fit(gt: GroundTruth, config: TrainConfig, *, init: Optional[SplatSet] = None,
        log_path: str | Path | None = None, checkpoint_dir: str | Path | None = None,
        callback: Optional[Callable[[int, dict], None]] = None) -> tuple[SplatSet, list[dict]]:
    """Optimize surfels against the bundle's training views."""
    if gt.n_views < 2:
        raise InsufficientViews(f"need at least 2 training views, got {gt.n_views}")
    splats = init if init is not None else init_splats(gt, config.n_splats, config.init_noise,
                                                       config.init_mode, config.seed)
    views = _Views(gt, config.weights.levels)
    perm_rng = rng_for(config.seed, "permutations")
    state = OptimizerState()
    history = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for it in range(1, config.iterations + 1):
            order = range(gt.n_views) if config.full_batch else [(it - 1) % gt.n_views]
            tensors = splats.tensors(requires_grad=True)
            feature_on = it > config.feature_start
            loss = None
            parts = []
            for i in order:
                cam = views.cameras[i]
                perms = sample_permutations(cam.height, cam.width, config.weights.patch, perm_rng)
                li, bi = _view_loss(views, i, tensors, config.weights, perms, feature_on)
                loss = li if loss is None else loss + li
                parts.append(bi)
            loss.backward()
            grads = {k: t.grad.numpy() if t.grad is not None else np.zeros(t.shape) for k, t in tensors.items()}
            splats, state = step(splats, grads, state, config)
            record = {"iter": it}
            for key in parts[0]:
                record[key] = float(np.mean([p[key] for p in parts]))
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if callback is not None:
                callback(it, record)
            if checkpoint_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_splats_ply(splats, Path(checkpoint_dir) / f"iter_{it:06d}.ply")
            if it % 250 == 0:
                log.info("iter %d total %.5f", it, record["total"])
    finally:
        if log_fh is not None:
            log_fh.close()
    return splats, history


# -- gradient audit ----------------------------------------------------------

LOSS_NAMES = ("color", "ranking", "smoothing", "feature", "distortion", "normal")
REL_FLOOR = 1e-8


@dataclass
class LossCheck:
    loss: str
    splats: list
    checked: int
    max_rel_error: float
    tolerance: float
    excluded: list
    failures: list
    per_field: dict

    @property
    def passed(self) -> bool:
        # every field must actually have been exercised
        covered = all(self.per_field.get(f, 0) > 0 for f in SplatSet.FIELDS)
        return covered and self.max_rel_error <= self.tolerance


@dataclass
class GradCheckReport:
    checks: list
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "step": self.step,
            "losses": [{**asdict(c), "passed": c.passed} for c in self.checks],
        }

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"{status} {c.loss:<10} splats={len(c.splats)} params={c.checked} "
                         f"excluded={len(c.excluded)} max_rel_err={c.max_rel_error:.3e}")
        return "\n".join(lines)


def _loss_fn(name: str, views: _Views, weights: LossWeights, perms, view: int = 0):
    cam = views.cameras[view]

    def fn(tensors):
        b = render_view(cam, tensors)
        covered = b.covered.numpy()
        if name == "color":
            return color_loss(b.color, views.targets[view], weights.ssim)
        if name == "ranking":
            return ranking_loss_image(b.depth, views.monos[view], covered, perms, weights.margin)
        if name == "smoothing":
            return smoothing_loss(b.depth, views.monos[view], weights.edge, weights.smooth_tol, covered)
        if name == "feature":
            return feature_loss(views.features[view], views.sources(view), b.depth, covered, weights.scales)
        if name == "distortion":
            return distortion_loss(b.contribs)
        if name == "normal":
            return normal_loss(b.contribs, depth_to_normal(cam, b.depth))
        raise ValueError(f"unknown loss {name!r}")

    return fn


def small_problem(seed: int = 0, size: int = 32, n_splats: int = 64) -> tuple[GroundTruth, SplatSet]:
    """The default gradient-check configuration: reference scene, 32x32, 64 splats."""
    from .synth import SceneSpec, generate_scene

    spec = SceneSpec.preset("reference", width=size, height=size, n_points=20_000, seed=seed,
                            heldout={"count": 0})
    gt = generate_scene(spec)
    splats = init_splats(gt, n_splats, 0.02, seed=seed)
    rng = rng_for(seed, "gradcheck-params")
    splats.opacity_logit[:] = rng.normal(0.0, 1.0, size=len(splats))
    return gt, splats


def gradient_check(gt: Optional[GroundTruth] = None, splats: Optional[SplatSet] = None,
                   losses: Sequence[str] | str = "all", tolerance: float = 1e-4, h: float = 1e-4,
                   n_check: int = 10, seed: int = 0, weights: Optional[LossWeights] = None) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    For every selected loss, ``n_check`` splats contributing to the checked
    view are drawn at random and each of their 13 scalar parameters is
    perturbed by ``+-h``. A parameter whose stencil changes any recorded gate
    decision is excluded (and listed). The relative error of an entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if gt is None or splats is None:
        gt, splats = small_problem(seed)
    if losses == "all":
        losses = LOSS_NAMES
    elif isinstance(losses, str):
        losses = [losses]
    weights = weights or LossWeights(patch=8)
    views = _Views(gt, weights.levels)
    cam = gt.cameras[0]
    perms = sample_permutations(cam.height, cam.width, weights.patch, rng_for(seed, "gradcheck-perm"))
    base_buffers = render_view(cam, splats)
    ids = base_buffers.contribs.ids
    contributing = np.unique(ids[ids >= 0].numpy())
    rng = rng_for(seed, "gradcheck-select")
    chosen = np.sort(rng.choice(contributing, size=min(n_check, len(contributing)), replace=False))
    base = splats.params()

    def evaluate(params):
        with torch.no_grad(), record_gates() as rec:
            val = float(fn({k: torch.as_tensor(v) for k, v in params.items()}))
        return val, rec

    checks = []
    for name in losses:
        fn = _loss_fn(name, views, weights, perms)
        tensors = splats.tensors(requires_grad=True)
        value = fn(tensors)
        value.backward()
        analytic = {k: (t.grad.numpy() if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}
        _, sig0 = evaluate(base)
        max_err, checked, excluded, failures = 0.0, 0, [], []
        per_field = dict.fromkeys(SplatSet.FIELDS, 0)
        for sid in chosen:
            for fname in SplatSet.FIELDS:
                width = base[fname].reshape(len(splats), -1).shape[1]
                for comp in range(width):
                    vals, sigs = [], []
                    for sgn in (1.0, -1.0):
                        params = {k: v.copy() for k, v in base.items()}
                        params[fname].reshape(len(splats), -1)[sid, comp] += sgn * h
                        v, s = evaluate(params)
                        vals.append(v)
                        sigs.append(s)
                    flipped = sigs[0].first_difference(sig0) or sigs[1].first_difference(sig0)
                    if flipped:
                        excluded.append((int(sid), fname, comp, flipped))
                        continue
                    numeric = (vals[0] - vals[1]) / (2 * h)
                    a = float(analytic[fname].reshape(len(splats), -1)[sid, comp])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
                    checked += 1
                    per_field[fname] += 1
                    if err > tolerance:
                        failures.append((int(sid), fname, comp, a, numeric, err))
                    max_err = max(max_err, err)
        checks.append(LossCheck(name, [int(s) for s in chosen], checked, max_err, tolerance, excluded, failures, per_field))
    return GradCheckReport(checks, tolerance, h)
