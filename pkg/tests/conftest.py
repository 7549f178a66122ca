import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from panograph.scene_io import SYNTHETIC_CLASSES, SyntheticSceneConfig, generate_synthetic_scene

settings.register_profile("default", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion id -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def crowded_frame():
    return generate_synthetic_scene(SyntheticSceneConfig(crowding=True, seed=7))


@pytest.fixture(scope="session")
def classes():
    return SYNTHETIC_CLASSES
