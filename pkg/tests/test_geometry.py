import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import random_camera, random_rotation
from oracles import project as oracle_project
from splatfit import Camera, project_point, ray_through_pixel, unproject_pixel
from splatfit.errors import BehindCamera, NonPositiveDepth
from splatfit.geometry import compose_poses, look_at, pixel_directions, project_points


def test_principal_axis_ray(axis_camera):
    ray = ray_through_pixel(axis_camera, (50, 50))
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(ray.origin, 0.0)


def test_ray_at_45_degrees(axis_camera):
    # (150, 50) lies outside a 100-pixel image, so use a wider twin of the same intrinsics
    wide = Camera(100.0, 100.0, 50.0, 50.0, 200, 100, axis_camera.c2w)
    ray = ray_through_pixel(wide, (150, 50))
    np.testing.assert_allclose(ray.direction, np.array([1, 0, 1]) / np.sqrt(2), atol=1e-15)
    assert abs(np.linalg.norm(ray.direction) - 1) < 1e-12


def test_pixel_bounds_are_asserted(axis_camera):
    with pytest.raises(AssertionError):
        ray_through_pixel(axis_camera, (101, 5))


@pytest.mark.parametrize("x, pixel, z", [((0, 0, 1), (50, 50), 1.0), ((0.5, 0, 1), (100, 50), 1.0)])
def test_project_known_points(axis_camera, x, pixel, z):
    p, depth = project_point(axis_camera, np.array(x, float))
    np.testing.assert_allclose(p, pixel, atol=1e-12)
    assert depth == pytest.approx(z)


@pytest.mark.parametrize("z", [-1.0, 0.0, 5e-10])
def test_behind_camera(axis_camera, z):
    with pytest.raises(BehindCamera):
        project_point(axis_camera, np.array([0.0, 0.0, z]))


def test_unproject_on_axis(axis_camera):
    np.testing.assert_allclose(unproject_pixel(axis_camera, (50, 50), 2.0), [0, 0, 2], atol=1e-15)


@pytest.mark.parametrize("depth", [0.0, -1.0])
def test_unproject_rejects_nonpositive_depth(axis_camera, depth):
    with pytest.raises(NonPositiveDepth):
        unproject_pixel(axis_camera, (10, 10), depth)


def test_round_trip_thousand_samples(rng):
    worst = 0.0
    for _ in range(1000):
        cam = random_camera(rng)
        p = rng.uniform([0, 0], [cam.width, cam.height])
        d = rng.uniform(0.1, 10.0)
        x = unproject_pixel(cam, p, d)
        q, z = project_point(cam, x)
        worst = max(worst, np.abs(q - p).max())
        assert np.linalg.norm(x - cam.center) == pytest.approx(d, rel=1e-12)
    assert worst < 1e-6


def test_projection_matches_textbook_formula(rng):
    for _ in range(50):
        cam = random_camera(rng)
        x = cam.center + cam.rotation @ np.array([*rng.normal(size=2), rng.uniform(0.5, 4)])
        p, z = project_point(cam, x)
        p_ref, z_ref = oracle_project(cam.K, cam.c2w, x)
        np.testing.assert_allclose(p, p_ref, rtol=1e-12, atol=1e-9)
        assert z == pytest.approx(z_ref, rel=1e-12)


def test_batched_projection_agrees_with_scalar(rng):
    cam = random_camera(rng)
    pts = cam.center + rng.normal(size=(200, 3)) @ cam.rotation.T * 0.3 + 3 * cam.rotation[:, 2]
    pix, z = project_points(cam, pts)
    for i in range(0, 200, 17):
        p, zi = project_point(cam, pts[i])
        np.testing.assert_allclose(pix[i], p, atol=1e-10)
        assert z[i] == pytest.approx(zi)


def test_pixel_directions_unit_and_consistent(rng):
    cam = random_camera(rng, 16, 12)
    dirs = pixel_directions(cam)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(dirs[3, 5], ray_through_pixel(cam, (5.5, 3.5)).direction, atol=1e-14)


def test_pose_composition_stays_orthonormal(rng):
    pose = np.hstack([np.eye(3), np.zeros((3, 1))])
    for _ in range(200):
        pose = compose_poses(pose, np.hstack([random_rotation(rng), rng.normal(size=(3, 1))]))
    rot = pose[:, :3]
    assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-9


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.5, 3))
def test_look_at_points_forward(x, y, z):
    eye = np.array([x, y, z])
    if np.linalg.norm(eye[:2]) < 1e-3:
        eye[0] += 0.5
    c2w = look_at(eye, np.zeros(3))
    forward = c2w[:, 2]
    np.testing.assert_allclose(forward, -eye / np.linalg.norm(eye), atol=1e-12)
    Camera(10, 10, 5, 5, 10, 10, c2w)  # passes the orthonormality invariant


def test_camera_invariants():
    pose = np.hstack([np.eye(3), np.zeros((3, 1))])
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 5, 5, 10, 10, pose)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 10, 5, 10, 10, pose)
    skew = pose.copy()
    skew[0, 1] = 1e-6
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 5, 5, 10, 10, skew)


def test_camera_json_round_trip(tmp_path, rng):
    cam = random_camera(rng)
    cam.save(tmp_path / "cam.json")
    data = json.loads((tmp_path / "cam.json").read_text())
    assert set(data) == {"fx", "fy", "cx", "cy", "width", "height", "c2w"}
    assert len(data["c2w"]) == 12
    back = Camera.load(tmp_path / "cam.json")
    np.testing.assert_array_equal(back.c2w, cam.c2w)
    assert (back.fx, back.fy, back.cx, back.cy, back.width, back.height) == (
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
