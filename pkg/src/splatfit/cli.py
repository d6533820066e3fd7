"""``splatfit`` command-line entry point.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 empty result,
5 verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .errors import (
    EmptyPointSet,
    EmptySurface,
    InsufficientViews,
    InvalidBundle,
    InvalidSpec,
    NoOverlap,
    NonFiniteGradient,
    SplatfitError,
)
from .io import read_pfm, write_json_atomic, write_mesh_ply, write_obj, write_pfm, write_png

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_EMPTY, EXIT_VERIFY = 0, 2, 3, 4, 5
THREADS_ENV = "SPLATFIT_THREADS"

log = logging.getLogger("splatfit")


class UsageError(SplatfitError):
    pass


# -- config overrides ------------------------------------------------------

_SECTION_ALIASES = {"losses": "weights", "loss": "weights"}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` assignment to a nested dict (in place)."""
    if "=" not in assignment:
        raise UsageError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise UsageError(f"empty override key in {assignment!r}")
    parts[0] = _SECTION_ALIASES.get(parts[0], parts[0])
    node = config
    for p in parts[:-1]:
        child = node.get(p)
        if not isinstance(child, dict):
            child = {}
            node[p] = child
        node = child
    node[parts[-1]] = _parse_value(value.strip())
    return config


def weight_overrides(spec: str) -> list[str]:
    """``"l3=0,l1=0.5"`` -> ``["weights.l3=0", "weights.l1=0.5"]``."""
    return [f"weights.{item.strip()}" for item in spec.replace(";", ",").split(",") if item.strip()]


def build_train_config(config_path: Optional[str], overrides: Sequence[str]):
    from .losses import LossWeights
    from .optim import TrainConfig

    base = TrainConfig().to_dict()
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        for k, v in loaded.items():
            k = _SECTION_ALIASES.get(k, k)
            base[k] = {**base[k], **v} if isinstance(base.get(k), dict) and isinstance(v, dict) else v
    for item in overrides:
        apply_override(base, item)
    try:
        base["weights"] = LossWeights.from_dict(base["weights"])
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def config_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


# -- helpers -----------------------------------------------------------------

def resolve_threads(flag: Optional[int]) -> Optional[int]:
    if flag:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


class Manifest:
    def __init__(self, command: str, seed: Optional[int]):
        self.data = {"command": command, "seed": seed, "version": __version__, "inputs": {},
                     "outputs": {}, "timings": {}, "config_hash": None}
        self._t0 = time.perf_counter()

    def stage(self, name: str, start: float) -> None:
        self.data["timings"][name] = round(time.perf_counter() - start, 4)

    def write(self, out_dir: Path) -> Path:
        self.data["timings"]["total"] = round(time.perf_counter() - self._t0, 4)
        path = out_dir / "manifest.json"
        write_json_atomic(path, self.data)
        return path


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_splats(path: str):
    from .splats import load_splats_ply

    try:
        return load_splats_ply(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load splats from {path}: {exc}") from exc


# -- commands ----------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    from .synth import SceneSpec, generate_scene, write_bundle

    spec = SceneSpec.load(args.spec) if args.spec else SceneSpec.preset(args.preset)
    if args.seed is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out = _out_dir(args.out)
    manifest = Manifest("gen-scene", spec.seed)
    t = time.perf_counter()
    gt = generate_scene(spec)
    write_bundle(gt, out)
    manifest.stage("generate", t)
    manifest.data["config_hash"] = config_hash(json.dumps(spec.to_dict(), sort_keys=True).encode())
    manifest.data["inputs"] = {"spec": args.spec or f"preset:{args.preset}"}
    manifest.data["outputs"] = {"bundle": str(out)}
    manifest.write(out)
    cov = [float((d > 0).mean()) for d in gt.depths]
    print(f"wrote {gt.n_views} views ({spec.width}x{spec.height}) + {len(gt.heldout_cameras)} held-out, "
          f"{len(gt.points)} surface points to {out}; coverage " + ", ".join(f"{c:.2f}" for c in cov))
    return EXIT_OK


def cmd_fit(args) -> int:
    from .optim import configure_torch, fit
    from .splats import save_splats_ply
    from .synth import load_bundle

    overrides = list(args.set or [])
    if args.weights:
        overrides += weight_overrides(args.weights)
    if args.iterations is not None:
        overrides.append(f"iterations={args.iterations}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.checkpoint_every is not None:
        overrides.append(f"checkpoint_every={args.checkpoint_every}")
    config = build_train_config(args.config, overrides)
    configure_torch(args.deterministic, resolve_threads(args.threads))
    gt = load_bundle(args.scene)
    out = _out_dir(args.out)
    manifest = Manifest("fit", config.seed)
    serialized = config.serialize()
    (out / "config.json").write_bytes(serialized + b"\n")
    manifest.data["config_hash"] = config_hash(serialized)
    manifest.data["inputs"] = {"scene": str(args.scene), "config": args.config}
    manifest.data["deterministic"] = bool(args.deterministic)
    t = time.perf_counter()
    ckpt = out / "checkpoints" if config.checkpoint_every else None
    if ckpt is not None:
        ckpt.mkdir(exist_ok=True)
    splats, history = fit(gt, config, log_path=out / "train.jsonl", checkpoint_dir=ckpt)
    manifest.stage("fit", t)
    save_splats_ply(splats, out / "final.ply")
    manifest.data["outputs"] = {"splats": str(out / "final.ply"), "log": str(out / "train.jsonl"),
                                "config": str(out / "config.json")}
    manifest.data["final_loss"] = history[-1]["total"]
    manifest.write(out)
    print(f"fit {config.iterations} iterations, final loss {history[-1]['total']:.6f} -> {out / 'final.ply'}")
    return EXIT_OK


def cmd_recon(args) -> int:
    from .fusion import reconstruct
    from .synth import load_bundle

    splats = _load_splats(args.splats)
    gt = load_bundle(args.scene)
    out = _out_dir(args.out)
    manifest = Manifest("recon", args.seed)
    t = time.perf_counter()
    rec = reconstruct(splats, gt, voxel=args.voxel, trunc=args.trunc, n_samples=args.samples, seed=args.seed)
    manifest.stage("recon", t)
    write_mesh_ply(out / "mesh.ply", rec.mesh.vertices, rec.mesh.triangles)
    outputs = {"mesh": str(out / "mesh.ply"), "metrics": str(out / "metrics.json")}
    if args.obj:
        write_obj(out / "mesh.obj", rec.mesh.vertices, rec.mesh.triangles)
        outputs["obj"] = str(out / "mesh.obj")
    write_json_atomic(out / "metrics.json", rec.metrics)
    params = {"voxel": args.voxel, "trunc": args.trunc, "samples": args.samples, "seed": args.seed}
    manifest.data["config_hash"] = config_hash(json.dumps(params, sort_keys=True).encode())
    manifest.data["inputs"] = {"splats": args.splats, "scene": args.scene}
    manifest.data["outputs"] = outputs
    manifest.write(out)
    m = rec.metrics
    print(f"chamfer {m['chamfer']:.5f} (acc {m['accuracy']:.5f}, comp {m['completeness']:.5f}); "
          f"depth pct<1 {m['depth']['pct1']:.1f}%")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .optim import LOSS_NAMES, gradient_check
    from .synth import load_bundle

    losses = LOSS_NAMES if args.loss == "all" else [s.strip() for s in args.loss.split(",")]
    unknown = set(losses) - set(LOSS_NAMES)
    if unknown:
        raise UsageError(f"unknown loss {sorted(unknown)}; choose from {', '.join(LOSS_NAMES)} or all")
    gt = splats = None
    if args.scene:
        from .synth import init_splats

        gt = load_bundle(args.scene)
        splats = init_splats(gt, args.splats_count, 0.02, seed=args.seed)
    report = gradient_check(gt, splats, losses, tolerance=args.tolerance, n_check=args.n_check, seed=args.seed)
    print(report.summary())
    if args.out:
        write_json_atomic(args.out, report.to_dict())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_eval_depth(args) -> int:
    from .fusion import depth_metrics, pooled_depth_metrics, render_depths
    from .synth import load_bundle

    if args.pred and args.gt:
        metrics = depth_metrics(read_pfm(args.pred), read_pfm(args.gt), args.unit)
    elif args.splats and args.scene:
        gt = load_bundle(args.scene)
        use_held = args.views == "heldout"
        cams = gt.heldout_cameras if use_held else gt.cameras
        depths = gt.heldout_depths if use_held else gt.depths
        if not cams:
            raise UsageError(f"bundle has no {args.views} views")
        preds = render_depths(_load_splats(args.splats), cams)
        metrics = pooled_depth_metrics(preds, depths, args.unit)
    else:
        raise UsageError("give either --pred and --gt, or --splats and --scene")
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.out:
        write_json_atomic(args.out, metrics)
    return EXIT_OK


def cmd_render(args) -> int:
    import torch

    from .geometry import Camera
    from .renderer import render_view

    splats = _load_splats(args.splats)
    try:
        camera = Camera.load(args.camera)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load camera {args.camera}: {exc}") from exc
    out = _out_dir(args.out)
    with torch.no_grad():
        buf = render_view(camera, splats, background=tuple(args.background)).numpy()
    write_png(out / "rgb.png", buf["color"])
    write_pfm(out / "depth.pfm", buf["depth"])
    write_pfm(out / "normal.pfm", buf["normal"])
    write_pfm(out / "alpha.pfm", buf["acc"])
    print(f"rendered {camera.width}x{camera.height}: coverage {float((buf['acc'] >= 0.5).mean()):.3f} -> {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatfit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic scene bundle")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--spec", help="scene spec JSON")
    src.add_argument("--preset", default="sphere", choices=["sphere", "reference"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_scene)

    f = sub.add_parser("fit", help="optimize splats against a scene bundle")
    f.add_argument("--scene", required=True)
    f.add_argument("--config", help="TrainConfig JSON")
    f.add_argument("--out", required=True)
    f.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, last wins")
    f.add_argument("--weights", help='loss weight overrides, e.g. "l3=0,l1=0.5"')
    f.add_argument("--iterations", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--checkpoint-every", type=int)
    f.add_argument("--deterministic", action="store_true")
    f.add_argument("--threads", type=int)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("recon", help="fuse rendered depth into a mesh and score it")
    r.add_argument("--splats", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--voxel", type=float, default=0.01)
    r.add_argument("--trunc", type=float, default=0.03)
    r.add_argument("--samples", type=int, default=100_000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--obj", action="store_true", help="also write mesh.obj")
    r.set_defaults(func=cmd_recon)

    c = sub.add_parser("gradcheck", help="finite-difference audit of loss gradients")
    c.add_argument("--loss", default="all", help="all or a comma list of loss names")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-check", type=int, default=10)
    c.add_argument("--scene", help="optional bundle (default: built-in 32x32 reference scene)")
    c.add_argument("--splats-count", type=int, default=64)
    c.add_argument("--out", help="write the JSON report here")
    c.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval-depth", help="threshold depth metrics")
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--splats")
    e.add_argument("--scene")
    e.add_argument("--views", choices=["heldout", "train"], default="heldout")
    e.add_argument("--unit", type=float, default=0.01)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_depth)

    v = sub.add_parser("render", help="render splats from one camera")
    v.add_argument("--splats", required=True)
    v.add_argument("--camera", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--background", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    v.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteGradient as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EmptySurface, EmptyPointSet, NoOverlap) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (UsageError, InvalidSpec, InvalidBundle, InsufficientViews, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
