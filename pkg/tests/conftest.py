import numpy as np
import pytest

from stamnet.tensor import Tensor


def numeric_grad(fn, arrays, h=1e-5):
    """Central finite differences of a scalar-valued fn over a list of arrays.

    Independent of the autodiff engine: perturbs one entry at a time and
    re-evaluates. Returns one gradient array per input.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    """Max elementwise relative error with an absolute floor for tiny grads."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom))


def check_grads(build_loss, params, tol=1e-4, h=1e-5):
    """Compare tape gradients of build_loss() against central differences.

    ``params`` are leaf Tensors whose .data is perturbed in place by the
    numeric oracle. Returns the worst relative error seen.
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_grad(lambda: float(build_loss().data), [p.data for p in params], h=h)
    worst = max(rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient check failed: max rel err {worst:.3e} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
