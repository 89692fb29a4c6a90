import numpy as np
import pytest

from sofa import autodiff as ad

FD_STEP = 1e-5
GRAD_TOL = 1e-4

_acceptance_lines: list[str] = []


def finite_difference(fn, arrays, step=FD_STEP):
    """Central differences of scalar ``fn(*arrays)`` wrt every array (arrays are perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, out = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*arrays)
            flat[i] = orig - step
            lo = fn(*arrays)
            flat[i] = orig
            out[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def gradcheck(build, *arrays):
    """Compare backward() against central differences; returns the worst relative error.

    ``build`` maps parameter Nodes to a scalar Node.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    params = [ad.parameter(a.copy()) for a in arrays]
    root = build(*params)
    ad.backward(root)
    numeric = finite_difference(lambda *xs: float(build(*[ad.const(x) for x in xs]).value), arrays)
    return max(rel_error(p.grad, n) for p, n in zip(params, numeric))


def param_gradcheck(params, loss_fn, names=None):
    """Gradient check for ``loss_fn()`` wrt entries of a ParamStore, perturbed in place."""
    names = list(params) if names is None else list(names)
    params.zero_grad()
    ad.backward(loss_fn())
    analytic = [params[n].grad.copy() for n in names]
    numeric = finite_difference(lambda *_: float(loss_fn().value),
                                [params[n].value for n in names])
    return max(rel_error(a, b) for a, b in zip(analytic, numeric))


@pytest.fixture
def criterion():
    """Record an acceptance criterion outcome for the end-of-run summary."""

    def record(number, name, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        _acceptance_lines.append(f"[{status}] criterion {number}: {name} {detail}".rstrip())
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
