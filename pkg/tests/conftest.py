import numpy as np
import pytest

from bartvs.model import Dataset, Hyperparams


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture
def short_hp():
    """Short chains for tests that only need a working sampler."""
    return Hyperparams(m=10, n_burn=30, n_post=60, n_restarts=2)


def make_dataset(n=40, K=3, seed=0, discrete=False):
    r = np.random.default_rng(seed)
    X = r.integers(0, 4, size=(n, K)).astype(float) if discrete else r.uniform(size=(n, K))
    y = X[:, 0] + r.normal(0, 0.3, n)
    return Dataset(X, y)


# One line per acceptance criterion, repeated in the terminal summary so the
# verdicts are visible even when output capture hides the test's prints.
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
