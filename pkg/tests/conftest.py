import pytest

from helpers import run_scene
from pvmap.simulate import simulate_preset


@pytest.fixture(scope="session")
def pp1_zero():
    return run_scene(simulate_preset("pp1-desk", seed=0, noise="zero-noise"))


@pytest.fixture(scope="session")
def pp2_zero():
    return run_scene(simulate_preset("pp2-desk", seed=0, noise="zero-noise"))


@pytest.fixture(scope="session")
def pp1_noisy():
    return run_scene(simulate_preset("pp1-desk", seed=1, noise="paper-noise"))
