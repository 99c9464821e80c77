import numpy as np
import pytest

from gridcast import tensorcore as tc


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def max_rel_error(analytic, numeric):
    """Elementwise relative error, floored at 1e-3 of the largest gradient."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(loss_fn, arrays, eps=1e-5):
    """Compare tape gradients of ``loss_fn(tensors)`` with finite differences.

    Returns the worst relative error over every array in ``arrays``.
    """
    tensors = {k: tc.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    with tc.Tape() as tape:
        loss = loss_fn(tensors)
    grads = tc.reverse_gradients(tape, loss, tensors.values())
    worst = 0.0
    for name in arrays:
        def f(x, name=name):
            trial = {k: tc.Tensor(x if k == name else v) for k, v in arrays.items()}
            return loss_fn(trial).item()

        worst = max(worst, max_rel_error(grads[name], numeric_grad(f, arrays[name], eps)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
