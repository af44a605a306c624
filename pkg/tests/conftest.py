import numpy as np
import pytest

from roscam.filters import extract_supervision
from roscam.synth import SceneConfig, generate_scene, render_frames, synthetic_tracker


def outlier_config(seed: int) -> SceneConfig:
    """20% of the scene points move; 0.5 px tracker noise."""
    return SceneConfig(n_static=240, n_moving=60, pixel_noise=0.5, seed=seed)


def extract(scene, budget=100):
    return extract_supervision(render_frames(scene), synthetic_tracker(scene), budget=budget)


@pytest.fixture(scope="session")
def clean_scene():
    return generate_scene(SceneConfig(seed=0))


@pytest.fixture(scope="session")
def clean_sup(clean_scene):
    return extract(clean_scene)[0]


@pytest.fixture(scope="session")
def outlier_scene():
    return generate_scene(outlier_config(0))


@pytest.fixture(scope="session")
def outlier_sup(outlier_scene):
    return extract(outlier_scene)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
