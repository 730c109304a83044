import numpy as np
import pytest

from superseg.overseg import oversegment
from superseg.synth import SceneSpec, generate_scene


@pytest.fixture(scope="session")
def scene():
    """A 4-instance synthetic scene with its default oversegmentation."""
    cloud = generate_scene(SceneSpec(num_instances=4, rng_seed=7))
    return cloud, oversegment(cloud)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record an acceptance outcome: ``criterion(n, ok, detail)`` returns ``ok``."""

    def record(n, ok, detail):
        _CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
