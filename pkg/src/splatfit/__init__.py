"""Sparse-view surface reconstruction with differentiable 2D Gaussian surfels."""
from .geometry import Camera, Ray, look_at, make_camera, project_point, ray_through_pixel, unproject_pixel
from .splats import Splat, SplatSet, load_splats_ply, save_splats_ply
from .renderer import render_view, depth_to_normal
from .losses import LossWeights
from .synth import SceneSpec, GroundTruth, generate_scene, init_splats, load_bundle, write_bundle
from .optim import TrainConfig, fit, gradient_check

__version__ = "0.1.0"

__all__ = [
    "Camera", "Ray", "look_at", "make_camera", "project_point", "ray_through_pixel", "unproject_pixel",
    "Splat", "SplatSet", "load_splats_ply", "save_splats_ply", "render_view", "depth_to_normal",
    "LossWeights", "SceneSpec", "GroundTruth", "generate_scene", "init_splats", "load_bundle",
    "write_bundle", "TrainConfig", "fit", "gradient_check", "__version__",
]
