import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sds.calibration import make_calibration
from sds.linalg import Rng, gaussian

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_fro(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def corr_inputs():
    def make(seed, in_dim=8, n_tokens=64, correlation=0.5):
        return make_calibration(Rng(seed), in_dim, n_tokens, correlation).x0

    return make


@pytest.fixture
def rand_weight():
    def make(seed, rows, cols, std=1.0):
        return gaussian(Rng(seed), rows, cols, 0.0, std)

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
