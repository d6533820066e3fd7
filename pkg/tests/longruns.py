"""Full-length training runs shared by the acceptance and descent tests.

Each run takes roughly ten minutes on one core, so results are memoized for
the session. Setting ``SPLATFIT_RUN_CACHE`` to a directory also persists them
across sessions, keyed by the training config and a hash of the package
sources, so a stale cache can never be picked up after a code change.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

from splatfit import LossWeights, SceneSpec, TrainConfig, fit, generate_scene, init_splats
from splatfit.fusion import reconstruct
from splatfit.splats import load_splats_ply, save_splats_ply

SRC = Path(__file__).resolve().parents[1] / "src" / "splatfit"

VARIANTS = {
    "full": {},
    "baseline": {"l1": 0.0, "l2": 0.0, "l3": 0.0},
    "no_ranking": {"l1": 0.0},
    "no_smoothing": {"l2": 0.0},
    "no_feature": {"l3": 0.0},
}

_memo: dict = {}
_scenes: dict = {}


def reference_scene(preset: str = "reference"):
    if preset not in _scenes:
        _scenes[preset] = generate_scene(SceneSpec.preset(preset, seed=0))
    return _scenes[preset]


def variant_config(name: str) -> TrainConfig:
    weights = LossWeights.from_dict({**LossWeights().to_dict(), **VARIANTS[name]})
    return TrainConfig(weights=weights, seed=0)


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC.rglob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _cache_dir(config: TrainConfig, preset: str):
    root = os.environ.get("SPLATFIT_RUN_CACHE")
    if not root:
        return None
    tag = b"" if preset == "reference" else preset.encode()
    key = hashlib.sha256(config.serialize() + _source_digest().encode() + tag).hexdigest()[:20]
    return Path(root) / key


def run_variant(name: str, preset: str = "reference") -> dict:
    """Train one ablation variant on a preset scene and score it."""
    if (name, preset) in _memo:
        return _memo[name, preset]
    gt = reference_scene(preset)
    config = variant_config(name)
    cache = _cache_dir(config, preset)
    if cache is not None and (cache / "result.json").is_file():
        result = json.loads((cache / "result.json").read_text())
        result["splats"] = load_splats_ply(cache / "final.ply")
        result["cached"] = True
    else:
        t0 = time.perf_counter()
        splats, history = fit(gt, config)
        elapsed = time.perf_counter() - t0
        metrics = reconstruct(splats, gt).metrics
        result = {"name": name, "seconds": elapsed, "metrics": metrics, "history": history, "cached": False}
        if cache is not None:
            cache.mkdir(parents=True, exist_ok=True)
            save_splats_ply(splats, cache / "final.ply")
            (cache / "result.json").write_text(json.dumps(result))
        result["splats"] = splats
    _memo[name, preset] = result
    return result


def init_metrics() -> dict:
    """Scores of the untrained initialization used by every variant."""
    if "init" not in _memo:
        gt = reference_scene()
        config = TrainConfig(seed=0)
        splats = init_splats(gt, config.n_splats, config.init_noise, config.init_mode, config.seed)
        _memo["init"] = reconstruct(splats, gt).metrics
    return _memo["init"]
