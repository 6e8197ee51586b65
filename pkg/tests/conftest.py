import numpy as np
import pytest

from butterfly_fields.core import BBox
from butterfly_fields.synthetic import SceneSpec, make_scenes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scenes():
    spec = SceneSpec(seed=50, image_w=256, image_h=256, count_range=(5, 15),
                     size_bounds=(((8.0, 48.0), (8.0, 48.0)), ((8.0, 48.0), (8.0, 48.0))))
    return make_scenes(spec, 5)


@pytest.fixture
def unit_box():
    return BBox(10.0, 6.0, 8.0, 8.0, 0)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
