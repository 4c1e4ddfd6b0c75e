import numpy as np
import pytest

from cyclestyle import autodiff as ad


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)) + np.max(np.abs(b)), 1e-12))


def check_grads(build, tensors, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences over ``tensors``.

    ``build()`` must return a scalar Tensor computed from ``tensors``.
    """
    for t in tensors:
        t.zero_grad()
    with ad.Tape() as tape:
        loss = build()
    ad.backward(loss, tape)

    def value():
        with ad.no_grad():
            return build().item()

    worst = 0.0
    for t in tensors:
        num = numeric_grad(value, t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
