import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def axis_camera():
    """fx = fy = 100, principal point (50, 50), identity pose, 100x100 pixels."""
    from splatfit import Camera

    return Camera(100.0, 100.0, 50.0, 50.0, 100, 100, np.hstack([np.eye(3), np.zeros((3, 1))]))


@pytest.fixture(scope="session")
def sphere_scene():
    from splatfit import SceneSpec, generate_scene

    return generate_scene(SceneSpec.preset("sphere", width=32, height=32, n_points=20_000))


@pytest.fixture(scope="session")
def reference_scene():
    from splatfit import SceneSpec, generate_scene

    return generate_scene(SceneSpec.preset("reference"))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
