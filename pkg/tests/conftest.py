import numpy as np
import pytest

from cineclip import diffcore as dc


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f over every element of array x (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def check_op_grads(build, arrays, h=1e-5):
    """build(*tensors) -> Tensor; loss is a fixed random projection of the output."""
    leaves = [dc.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    proj = np.random.default_rng(12345).standard_normal(out.shape)
    loss = dc.sum_(out * proj)
    grads = dc.backward(loss)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        def f():
            with dc.no_grad():
                return float(np.sum(build(*[dc.Tensor(a) for a in arrays]).data * proj))
        fd = numeric_grad(f, arr, h)
        worst = max(worst, rel_err(grads[id(leaf)], fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ------------------------------------------------------- acceptance summary

ACCEPTANCE_RESULTS = {}


def record(criterion, passed, detail):
    ACCEPTANCE_RESULTS.setdefault(criterion, []).append((bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_RESULTS):
        parts = ACCEPTANCE_RESULTS[crit]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
