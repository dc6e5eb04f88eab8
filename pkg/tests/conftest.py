import numpy as np
import pytest

from cokdlab import nn_core as nn

FD_STEP = 1e-5
FD_TOL = 1e-4


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def central_difference(f, arrays, h=FD_STEP):
    """Numerical gradient of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_gradients(forward, tensors, h=FD_STEP, tol=FD_TOL):
    """Compare tape gradients of ``forward(*tensors)`` against central differences.

    Returns the worst relative error seen.
    """
    for t in tensors:
        t.grad = None
    with nn.Tape() as tape:
        loss = forward(*tensors)
    nn.backward(loss, tape)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f():
        return float(forward(*tensors).data)

    numeric = central_difference(f, [t.data for t in tensors], h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = relative_error(a, n)
        worst = max(worst, float(err.max(initial=0.0)))
    assert worst < tol, f"gradient mismatch, worst relative error {worst:.3g}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
