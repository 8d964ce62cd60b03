import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def quiet_sim():
    """Ten seconds of noise-free slalom with zero gyro bias."""
    from trackdyn.simulation import NoiseConfig, SimConfig, make_script, simulate

    cfg = SimConfig(noise=NoiseConfig.zero(), initial_bias=(0.0, 0.0, 0.0))
    return simulate(cfg, make_script("varying-throttle-slalom", 10.0), 10.0)


@pytest.fixture(scope="session")
def noisy_sim():
    from trackdyn.simulation import SimConfig, make_script, simulate

    return simulate(SimConfig(seed=7), make_script("varying-throttle-slalom", 8.0), 8.0)


_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        request.config.stash.setdefault(_LINES, []).append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
