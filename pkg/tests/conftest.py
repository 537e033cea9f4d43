import numpy as np
import pytest

from gliomapipe.phantoms import make_phantom_cohort, write_phantom_cohort

ACCEPTANCE_LINES = []


def record_criterion(name, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" :: {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cohort():
    """Four 32x32x16 phantoms (raw intensities)."""
    return make_phantom_cohort(4, (32, 32, 16), seed=7)


@pytest.fixture(scope="session")
def cohort_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    return write_phantom_cohort(root, n_cases=5, shape=(32, 32, 16), seed=3)
