import numpy as np
import pytest

from gamloc import hungarian
from gamloc.synthgen import SceneConfig, generate_queries, generate_scene

BACKENDS = sorted(hungarian._KERNELS)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def scene_config():
    return SceneConfig(seed=3)


@pytest.fixture(scope="session")
def scene(scene_config):
    return generate_scene(scene_config)


@pytest.fixture(scope="session")
def clean_config():
    return SceneConfig(seed=11, inlier_descriptor_noise=0.0, keypoint_noise_px=0.0, image_clutter=0)


@pytest.fixture(scope="session")
def clean_scene(clean_config):
    return generate_scene(clean_config)


@pytest.fixture(scope="session")
def clean_queries(clean_scene, clean_config):
    return generate_queries(clean_scene, clean_config, 20, clutter_count=0, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


ACCEPTANCE = {}  # criterion number -> (passed, line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n][1])
