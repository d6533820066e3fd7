import numpy as np
from scipy.spatial.transform import Rotation

from splatfit import Camera, look_at


def random_rotation(rng):
    return Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()


def random_camera(rng, width=64, height=48):
    fx, fy = rng.uniform(40, 120, size=2)
    cx, cy = rng.uniform(0.3, 0.7) * width, rng.uniform(0.3, 0.7) * height
    c2w = np.hstack([random_rotation(rng), rng.normal(size=(3, 1))])
    return Camera(fx, fy, cx, cy, width, height, c2w)


def orbit_camera(eye, size=32, fov=40.0, target=(0.0, 0.0, 0.0)):
    from splatfit import make_camera

    return make_camera(size, size, fov, look_at(eye, target))
