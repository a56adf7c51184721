from __future__ import annotations

import numpy as np
import pytest

from legcalib.datagen import GaitScript, make_dataset, true_params
from legcalib.robot import RobotKinematics


@pytest.fixture(scope="session")
def robot():
    return RobotKinematics.default()


@pytest.fixture(scope="session")
def truth_params():
    return true_params()


@pytest.fixture(scope="session")
def short_dataset(robot, truth_params):
    """Seeded trot log with T = 50 steps."""
    return make_dataset(robot, GaitScript(duration=0.5), truth_params, seed=1)


@pytest.fixture(scope="session")
def clean_dataset(robot, truth_params):
    """Noise-free trot log with T = 50 steps."""
    return make_dataset(robot, GaitScript(duration=0.5), truth_params, seed=1, noise_scale=0.0)


def random_state(rng, n_feet=4, scale=1.0):
    from legcalib.manifold import ManifoldState, Pose, so3_exp

    phi = rng.normal(size=3)
    phi *= min(1.0, 2.5 / np.linalg.norm(phi))
    return ManifoldState(Pose(so3_exp(phi), scale * rng.normal(size=3)),
                         scale * rng.normal(size=3), scale * rng.normal(size=(n_feet, 3)),
                         0.1 * rng.normal(size=3), 0.01 * rng.normal(size=3))


# one summary line per acceptance criterion

_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when == "teardown":
        return
    if call.when == "setup" and call.excinfo is None:
        return
    n = mark.args[0]
    _CRITERIA[n] = _CRITERIA.get(n, True) and call.excinfo is None


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if _CRITERIA[n] else 'FAIL'}")
