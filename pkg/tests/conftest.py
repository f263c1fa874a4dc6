import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_sym(rng: np.random.Generator, n: int) -> np.ndarray:
    g = rng.standard_normal((n, n))
    return (g + g.T) / 2


def random_low_rank(rng: np.random.Generator, shape: tuple[int, int], r: int, symmetric: bool = False) -> np.ndarray:
    if symmetric:
        u = rng.standard_normal((shape[0], r))
        return u @ np.diag(rng.uniform(0.5, 2.0, r)) @ u.T
    return rng.standard_normal((shape[0], r)) @ rng.standard_normal((r, shape[1]))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# One line per acceptance criterion, echoed after the run so it shows up even
# when pytest captures output.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
