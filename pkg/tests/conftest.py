import numpy as np
import pytest

from heromamba import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted_sum(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    """Scalar probe ``sum(out * w)``; a random ``w`` exercises every output."""
    return (out * T.Tensor(w)).sum()


def randomize(module, rng, scale=0.5):
    """Push every parameter away from its (often zero or symmetric) init.

    Zero-initialised projections give exactly-zero analytic gradients on
    their inputs, where a finite-difference check only measures round-off.
    """
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)
    return module


# acceptance outcomes, echoed in the terminal summary so they survive capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
