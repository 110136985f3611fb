import numpy as np
import pytest

from posture_forecaster.motion.synthetic import Skeleton, TaskSpec, synthesize_dataset, synthesize_task


@pytest.fixture(scope="session")
def skeleton():
    return Skeleton(1778.0, 74.0)


@pytest.fixture(scope="session")
def one_task(skeleton):
    return synthesize_task(skeleton, TaskSpec("stoop", "two_handed", (0.0, 450.0, 300.0)), 3,
                           subject_id="S01", task_id="S01_T001")


@pytest.fixture(scope="session")
def small_dataset():
    """Three subjects with two tasks each."""
    return synthesize_dataset(3, 2, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record (and print) the one-line verdict of an acceptance criterion."""
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
