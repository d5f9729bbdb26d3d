import numpy as np
import pytest

from slowfast_mv.ergodic import clear_invariant_cache
from slowfast_mv.model import LinearBenchmark, ModelSpec


def zero_model(d1=1, d2=1, **overrides):
    """Model with every coefficient zero unless overridden."""
    coeffs = dict(
        F=lambda x, mu, y, nu: np.zeros_like(x),
        G=lambda x, mu, nu: np.zeros((x.shape[0], d1, d1)),
        c=lambda x, mu, y, nu: np.zeros_like(y),
        b=lambda mu, y, nu: np.zeros_like(y),
        sigma1=lambda mu, y, nu: np.zeros((y.shape[0], d2, d1)),
        sigma2=lambda mu, y, nu: np.zeros((y.shape[0], d2, d2)),
    )
    coeffs.update(overrides)
    return ModelSpec(d1=d1, d2=d2, c1=0.0, c2=1.0, clt_compatible=True, **coeffs)


def decoupled_benchmark():
    """Benchmark whose slow drift ignores (y, nu)."""
    return LinearBenchmark(B=0.0, Bbar=0.0)


@pytest.fixture(autouse=True)
def _fresh_cache():
    clear_invariant_cache()
    yield


@pytest.fixture
def bench():
    return LinearBenchmark()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
