import numpy as np
import pytest

from groundrl import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-8):
    """Relative check; entries with tiny magnitude are compared absolutely."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    big = np.maximum(np.abs(analytic), np.abs(numeric)) >= floor
    rel = np.abs(analytic - numeric)[big] / np.maximum(np.abs(analytic), np.abs(numeric))[big]
    assert rel.size == 0 or rel.max() <= rtol, f"max relative error {rel.max():.3e}"
    assert np.all(np.abs(analytic - numeric)[~big] <= 1e-6)


def grad_of(fn, *arrays):
    """Analytic gradients of scalar ``fn(*tensors)`` with respect to each array."""
    leaves = [T.Tensor(a, requires_grad=True, name=f"x{i}") for i, a in enumerate(arrays)]
    with T.GradientTape() as tape:
        out = fn(*leaves)
    grads = T.backward(tape, out, leaves)
    return [grads[f"x{i}"].data for i in range(len(arrays))]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
