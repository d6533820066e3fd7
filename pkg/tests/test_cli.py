import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from splatfit import SplatSet, load_bundle, load_splats_ply
from splatfit.cli import (
    EXIT_EMPTY,
    EXIT_INPUT,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_VERIFY,
    UsageError,
    apply_override,
    build_train_config,
    main,
    resolve_threads,
    weight_overrides,
)
from splatfit.io import read_pfm, write_pfm
from splatfit.splats import save_splats_ply

SMALL = '{"width": 24, "height": 24, "n_points": 4000, "heldout": {"count": 1}}'


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({**json.loads(SMALL), "primitives": [
        {"type": "sphere", "center": [-0.28, 0.0, 0.05], "radius": 0.36},
        {"type": "box", "center": [0.3, 0.02, -0.08], "half_extents": [0.22, 0.25, 0.22]}], "blend": 0.05}))
    out = root / "scene"
    assert main(["gen-scene", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def fitted(bundle, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = main(["fit", "--scene", str(bundle), "--out", str(out), "--iterations", "6", "--set", "n_splats=400",
                 "--set", "weights.patch=8", "--set", "feature_start=2", "--deterministic", "--threads", "1"])
    assert code == EXIT_OK
    return out


# -- overrides -----------------------------------------------------------------

def test_apply_override_nested_and_aliases():
    cfg = {"weights": {"l1": 1.0}, "lr": {"color": 1.0}}
    apply_override(cfg, "losses.l1=0.5")
    apply_override(cfg, "lr.color=2e-3")
    apply_override(cfg, "init_mode=depth-backproject")
    apply_override(cfg, "new.deep.key=[1, 2]")
    assert cfg["weights"]["l1"] == 0.5 and cfg["lr"]["color"] == 2e-3
    assert cfg["init_mode"] == "depth-backproject" and cfg["new"]["deep"]["key"] == [1, 2]
    with pytest.raises(UsageError):
        apply_override(cfg, "no_equals")


def test_overrides_last_wins_over_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"iterations": 50, "losses": {"l2": 0.1}}))
    cfg = build_train_config(str(path), ["iterations=7", "weights.l2=0.3", *weight_overrides("l3=0, l1=0.25")])
    assert cfg.iterations == 7 and cfg.weights.l2 == 0.3 and cfg.weights.l3 == 0 and cfg.weights.l1 == 0.25
    assert cfg.lr["position"] == 1.6e-4
    with pytest.raises(UsageError):
        build_train_config(None, ["weights.l9=1"])
    with pytest.raises(UsageError):
        build_train_config(str(tmp_path / "missing.json"), [])


def test_thread_resolution(monkeypatch):
    monkeypatch.setenv("SPLATFIT_THREADS", "3")
    assert resolve_threads(None) == 3 and resolve_threads(2) == 2
    monkeypatch.setenv("SPLATFIT_THREADS", "many")
    with pytest.raises(UsageError):
        resolve_threads(None)
    monkeypatch.delenv("SPLATFIT_THREADS")
    assert resolve_threads(None) is None


# -- gen-scene -----------------------------------------------------------------

def test_gen_scene_layout(bundle):
    files = {p.name for p in bundle.iterdir() if p.is_file()}
    per_view = {"cam_{}.json", "rgb_{}.png", "depth_{}.pfm", "mono_{}.pfm", "mask_{}.png"}
    for i in range(3):
        assert {f.format(i) for f in per_view} <= files
    assert "cam_3.json" not in files
    assert {"spec.json", "gt_points.ply", "manifest.json"} <= files
    manifest = json.loads((bundle / "manifest.json").read_text())
    assert manifest["command"] == "gen-scene" and manifest["config_hash"]


def test_gen_scene_nine_views_and_identical_reruns(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({**json.loads(SMALL), "rig": {"count": 9, "spread": 20.0}}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-scene", "--spec", str(spec), "--out", str(a)]) == EXIT_OK
    assert main(["gen-scene", "--spec", str(spec), "--out", str(b)]) == EXIT_OK
    assert len(list(a.glob("cam_*.json"))) == 9
    assert tree_digest(a) == tree_digest(b)


def test_gen_scene_default_preset(tmp_path):
    assert main(["gen-scene", "--out", str(tmp_path / "s"), "--seed", "3"]) == EXIT_OK
    gt = load_bundle(tmp_path / "s")
    assert gt.n_views == 3 and gt.spec.seed == 3


def test_gen_scene_invalid_spec(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text('{"primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": 2.0}]}')
    assert main(["gen-scene", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert "unit sphere" in capsys.readouterr().err


# -- fit -----------------------------------------------------------------------

def test_fit_outputs(fitted):
    for name in ("final.ply", "train.jsonl", "manifest.json", "config.json"):
        assert (fitted / name).is_file()
    log = [json.loads(x) for x in (fitted / "train.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in log] == list(range(1, 7))
    manifest = json.loads((fitted / "manifest.json").read_text())
    assert manifest["config_hash"] == hashlib.sha256((fitted / "config.json").read_bytes().rstrip(b"\n")).hexdigest()
    assert manifest["seed"] == 0 and "fit" in manifest["timings"]
    assert isinstance(load_splats_ply(fitted / "final.ply"), SplatSet)


def test_fit_weight_flag_zeroes_feature_term(bundle, tmp_path):
    code = main(["fit", "--scene", str(bundle), "--out", str(tmp_path), "--iterations", "4", "--set", "n_splats=200",
                 "--set", "weights.patch=8", "--set", "feature_start=0", "--weights", "l3=0"])
    assert code == EXIT_OK
    log = [json.loads(x) for x in (tmp_path / "train.jsonl").read_text().splitlines()]
    assert all(r["L_f"] == 0.0 for r in log)


def test_fit_deterministic_rerun_is_byte_identical(bundle, fitted, tmp_path):
    code = main(["fit", "--scene", str(bundle), "--out", str(tmp_path), "--iterations", "6", "--set", "n_splats=400",
                 "--set", "weights.patch=8", "--set", "feature_start=2", "--deterministic", "--threads", "1"])
    assert code == EXIT_OK
    for name in ("final.ply", "train.jsonl", "config.json"):
        assert (tmp_path / name).read_bytes() == (fitted / name).read_bytes()


def test_fit_missing_depth_names_path(bundle, tmp_path, capsys):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(bundle, broken)
    (broken / "depth_1.pfm").unlink()
    assert main(["fit", "--scene", str(broken), "--out", str(tmp_path / "o"), "--iterations", "1"]) == EXIT_INPUT
    assert "depth_1.pfm" in capsys.readouterr().err


def test_fit_insufficient_views(bundle, tmp_path):
    import shutil

    one = tmp_path / "one"
    shutil.copytree(bundle, one)
    for stem in ("cam", "rgb", "depth", "mono", "mask"):
        for p in one.glob(f"{stem}_[12].*"):
            p.unlink()
    assert main(["fit", "--scene", str(one), "--out", str(tmp_path / "o"), "--iterations", "1"]) == EXIT_INPUT


def test_fit_non_finite_exit_code(bundle, tmp_path):
    # step 1 moves positions by lr; step 2 (splats now off-screen) adds ~0.67 lr, overflowing
    code = main(["fit", "--scene", str(bundle), "--out", str(tmp_path), "--iterations", "2",
                 "--set", "n_splats=100", "--set", "weights.patch=8", "--set", "lr.position=1.5e308"])
    assert code == EXIT_NUMERIC


def test_fit_bad_override(bundle, tmp_path):
    assert main(["fit", "--scene", str(bundle), "--out", str(tmp_path), "--set", "iterations=0"]) == EXIT_INPUT


# -- recon ---------------------------------------------------------------------

METRIC_KEYS = {"accuracy", "completeness", "chamfer", "depth"}
DEPTH_KEYS = {"pct1", "pct2", "pct4", "abs", "rel"}


def test_recon_outputs_and_schema(bundle, fitted, tmp_path):
    code = main(["recon", "--splats", str(fitted / "final.ply"), "--scene", str(bundle), "--out", str(tmp_path),
                 "--voxel", "0.02", "--trunc", "0.05", "--samples", "5000", "--obj"])
    assert code == EXIT_OK
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert set(metrics) == METRIC_KEYS and set(metrics["depth"]) == DEPTH_KEYS
    assert all(isinstance(metrics[k], float) and metrics[k] >= 0 for k in ("accuracy", "completeness", "chamfer"))
    assert all(0 <= metrics["depth"][k] <= 100 for k in ("pct1", "pct2", "pct4"))
    assert (tmp_path / "mesh.ply").read_bytes().startswith(b"ply\nformat binary_little_endian")
    assert (tmp_path / "mesh.obj").read_text().startswith(("v ", "#"))


def test_recon_far_splats_is_empty(bundle, tmp_path):
    far = SplatSet(np.full((5, 3), 50.0), np.tile([1.0, 0, 0, 0], (5, 1)), np.full((5, 2), -3.0),
                   np.zeros(5), np.full((5, 3), 0.5))
    save_splats_ply(far, tmp_path / "far.ply")
    code = main(["recon", "--splats", str(tmp_path / "far.ply"), "--scene", str(bundle), "--out", str(tmp_path / "o")])
    assert code == EXIT_EMPTY


def test_recon_unreadable_splats(bundle, tmp_path):
    (tmp_path / "x.ply").write_text("not a ply")
    assert main(["recon", "--splats", str(tmp_path / "x.ply"), "--scene", str(bundle), "--out", str(tmp_path)]) \
        == EXIT_INPUT


# -- gradcheck -----------------------------------------------------------------

def test_gradcheck_ranking_report(tmp_path, capsys):
    code = main(["gradcheck", "--loss", "ranking", "--out", str(tmp_path / "r.json")])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["passed"] and len(report["losses"][0]["splats"]) >= 10
    assert capsys.readouterr().out.startswith("PASS ranking")


def test_gradcheck_unreachable_tolerance():
    assert main(["gradcheck", "--loss", "color", "--tolerance", "1e-12"]) == EXIT_VERIFY


def test_gradcheck_unknown_loss():
    assert main(["gradcheck", "--loss", "colour"]) == EXIT_INPUT


# -- eval-depth / render -------------------------------------------------------

def test_eval_depth_from_pfm_pair(tmp_path, capsys):
    gt = np.full((6, 6), 2.0)
    write_pfm(tmp_path / "gt.pfm", gt)
    write_pfm(tmp_path / "pred.pfm", gt + 0.015)
    code = main(["eval-depth", "--pred", str(tmp_path / "pred.pfm"), "--gt", str(tmp_path / "gt.pfm"),
                 "--out", str(tmp_path / "m.json")])
    assert code == EXIT_OK
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["pct1"] == 0.0 and m["pct2"] == 100.0


def test_eval_depth_from_splats(bundle, fitted, tmp_path):
    code = main(["eval-depth", "--splats", str(fitted / "final.ply"), "--scene", str(bundle),
                 "--out", str(tmp_path / "m.json")])
    assert code == EXIT_OK
    assert set(json.loads((tmp_path / "m.json").read_text())) == DEPTH_KEYS


def test_eval_depth_requires_inputs():
    assert main(["eval-depth"]) == EXIT_INPUT


def test_render_outputs(bundle, fitted, tmp_path):
    code = main(["render", "--splats", str(fitted / "final.ply"), "--camera", str(bundle / "cam_0.json"),
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert read_pfm(tmp_path / "depth.pfm").shape == (24, 24)
    assert read_pfm(tmp_path / "normal.pfm").shape == (24, 24, 3)
    assert (tmp_path / "rgb.png").is_file() and (tmp_path / "alpha.pfm").is_file()


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "splatfit", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "0.1.0" in out.stdout
