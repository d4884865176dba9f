import numpy as np
import pytest

from teammmse import _mc
from teammmse.fading import CovarianceSet, build_covariances
from teammmse.netgen import Scenario, place_network
from teammmse.pilots import PilotConfig


def within(diff, se, k=3.0):
    """Elementwise |diff| <= k * se."""
    return np.all(np.abs(diff) <= k * se)


def scalar_cov(gains, n=1):
    """Isotropic covariances from an (L, K) gain array."""
    gains = np.asarray(gains, dtype=float)
    return CovarianceSet(gains[:, :, None, None] * np.eye(n))


@pytest.fixture(scope="session")
def desk():
    return Scenario.desk()


@pytest.fixture(scope="session")
def desk_drop(desk):
    dep = place_network(desk, _mc.stream(7, _mc.PLACEMENT, 0))
    cov = build_covariances(dep, desk)
    cfg = PilotConfig.from_deployment(dep, desk)
    return dep, cov, cfg


ACCEPTANCE = {}


def record(criterion, ok, detail=""):
    """Store one acceptance verdict and echo it; the assertion is left to the caller."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
