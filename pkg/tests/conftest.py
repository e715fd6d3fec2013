import numpy as np
import pytest


def fd_gradient(fn, arrays, step=1e-4):
    """Independent central-difference oracle used to audit backward()."""
    grads = []
    work = [np.array(a, dtype=np.float64) for a in arrays]
    for arr in work:
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = fn(work)
            flat[i] = keep - step
            lo = fn(work)
            flat[i] = keep
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(grad)
    return grads


def rel_err(analytic, numeric, guard=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), guard)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
