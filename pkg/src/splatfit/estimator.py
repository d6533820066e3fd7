"""scikit-learn style facade over scene fitting and reconstruction."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import InsufficientViews
from .geometry import Camera
from .losses import LossWeights
from .optim import TrainConfig, fit
from .synth import GroundTruth, load_bundle


def check_scene(X) -> GroundTruth:
    """Accept a :class:`GroundTruth` or a bundle directory path."""
    if isinstance(X, GroundTruth):
        gt = X
    elif isinstance(X, (str, Path)):
        gt = load_bundle(X)
    else:
        raise TypeError(f"expected a GroundTruth or bundle path, got {type(X).__name__}")
    if gt.n_views < 2:
        raise InsufficientViews(f"need at least 2 training views, got {gt.n_views}")
    return gt


def check_cameras(cameras) -> list[Camera]:
    if isinstance(cameras, Camera):
        return [cameras]
    cams = list(cameras)
    if not cams or not all(isinstance(c, Camera) for c in cams):
        raise TypeError("expected a Camera or a non-empty sequence of cameras")
    return cams


class SurfelReconstructor(BaseEstimator):
    """Fit surfels to a scene, then render depth or extract a mesh.

    ``fit`` takes a scene (``GroundTruth`` or bundle path), ``predict`` maps
    cameras to coverage-gated depth maps and ``score`` returns the negative
    chamfer distance of the fused mesh, so larger is better.
    """

    def __init__(self, n_splats: int = 5000, iterations: int = 3000, init_noise: float = 0.02,
                 init_mode: str = "surface-sample", weights: Optional[dict] = None, feature_start: int = 500,
                 lr: Optional[dict] = None, seed: int = 0, voxel: float = 0.01, trunc: float = 0.03):
        self.n_splats = n_splats
        self.iterations = iterations
        self.init_noise = init_noise
        self.init_mode = init_mode
        self.weights = weights
        self.feature_start = feature_start
        self.lr = lr
        self.seed = seed
        self.voxel = voxel
        self.trunc = trunc

    def train_config(self) -> TrainConfig:
        weights = LossWeights.from_dict({**LossWeights().to_dict(), **(self.weights or {})})
        base = TrainConfig()
        return TrainConfig(iterations=self.iterations, lr={**base.lr, **(self.lr or {})}, weights=weights,
                           feature_start=self.feature_start, n_splats=self.n_splats, init_noise=self.init_noise,
                           init_mode=self.init_mode, seed=self.seed)

    def fit(self, X, y=None, init=None):
        gt = check_scene(X)
        self.splats_, self.history_ = fit(gt, self.train_config(), init=init)
        self.n_views_ = gt.n_views
        return self

    def predict(self, cameras) -> np.ndarray:
        from .fusion import render_depths

        check_is_fitted(self, "splats_")
        return np.stack(render_depths(self.splats_, check_cameras(cameras)))

    def render(self, camera: Camera) -> dict:
        import torch

        from .renderer import render_view

        check_is_fitted(self, "splats_")
        with torch.no_grad():
            return render_view(camera, self.splats_).numpy()

    def reconstruct(self, X):
        from .fusion import reconstruct

        check_is_fitted(self, "splats_")
        return reconstruct(self.splats_, check_scene(X), voxel=self.voxel, trunc=self.trunc, seed=self.seed)

    def score(self, X, y=None) -> float:
        return -self.reconstruct(X).metrics["chamfer"]
