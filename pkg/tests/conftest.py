import numpy as np
import pytest

from rcdet import tensor as T

# Verdict lines collected by the acceptance suite; echoed after the run
# summary so they survive pytest's output capture.
ACCEPTANCE_VERDICTS: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function f at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_grad(build, x: np.ndarray, rtol: float = 1e-4, h: float = 1e-5):
    """Compare reverse-mode gradient of scalar-valued `build` against
    central differences.  `build` maps a Tensor to a scalar Tensor."""
    xt = T.tensor(x.copy(), requires_grad=True)
    loss = build(xt)
    loss.backward()
    assert xt.grad is not None

    def f(arr):
        with T.no_grad():
            return build(T.tensor(arr)).item()

    fd = numeric_grad(f, x.copy(), h=h)
    err = np.abs(xt.grad - fd)
    denom = np.abs(fd) + 1e-8
    worst = (err / denom).max()
    assert worst < rtol, f"gradient mismatch: worst rel err {worst:.3e}"
    return xt.grad, fd


@pytest.fixture
def rng():
    return np.random.default_rng(0)
