import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from reifenberg.geometry import PointCloud
from reifenberg.synth import GeneratorSpec, generate

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def circle():
    """Unit circle, 4096 equally spaced samples, r0 = 0.5."""
    return generate(GeneratorSpec("circle", m=4096, r0=0.5))


@pytest.fixture(scope="session")
def line2d():
    """Samples of the x-axis on [-2, 2] in R^2 with gap 1e-3; centers at least r0 from the ends."""
    t = np.linspace(-2, 2, 2001)
    pts = np.stack([t, np.zeros_like(t)], axis=1)
    return PointCloud(pts, 1, 0.5, 1e-3, interior=np.abs(t) <= 1.5)


@pytest.fixture(scope="session")
def plane3d():
    """Lattice on the square [-0.8, 0.8]^2 in the plane z = 0 of R^3 (gap just under r0/100)."""
    return generate(GeneratorSpec("plane", m=230 * 230, n=3, r0=0.5, half_width=0.8))


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Verdicts of the acceptance criteria, printed in the terminal summary."""
    return pytestconfig.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(log):
        name, ok, detail = log[k]
        terminalreporter.write_line(f"criterion {k} {'PASS' if ok else 'FAIL'} [{name}] {detail}")
