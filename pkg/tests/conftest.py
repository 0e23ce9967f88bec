import numpy as np
import pytest

from narrative_slds import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grads(loss_fn, params: dict, h: float = 1e-5, tol: float = 1e-4):
    """Compare autodiff gradients of ``loss_fn()`` against finite differences for each tensor."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    T.backward(loss)
    worst = {}
    for name, p in params.items():
        def f():
            with T.no_grad():
                return float(loss_fn().data)
        num = numeric_grad(f, p.data, h)
        assert p.grad is not None, f"{name} got no gradient"
        worst[name] = rel_error(p.grad, num)
        assert worst[name] < tol, f"{name}: relative error {worst[name]:.2e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record ``criterion(n, ok, detail)`` for the end-of-run acceptance summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        _ACCEPTANCE[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
