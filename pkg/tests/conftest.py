import numpy as np
import pytest


def central_difference(f, arrays, step=1e-6):
    """Numerical gradient of scalar ``f()`` with respect to each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            up = f()
            a[i] = old - step
            down = f()
            a[i] = old
            g[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.max(np.abs(n)), np.max(np.abs(a)), floor)
        worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
