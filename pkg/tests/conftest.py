import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def rel_err(a, n):
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def numeric_grad(loss, x, eps=1e-6):
    """Central differences of ``loss(v)`` around ``v = x``, one coordinate at a time.

    ``v`` is an extended-precision copy of ``x``. Everything that depends on the
    perturbed coordinate is then computed in extended precision, so the
    quotient is not limited by 64-bit cancellation. ``loss`` must return an
    array scalar (not a Python float) to keep that precision.
    """
    v = np.array(x, dtype=np.longdouble)
    g = np.zeros(v.shape, dtype=np.longdouble)
    flat, gflat = v.reshape(-1), g.reshape(-1)
    h = np.longdouble(eps)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = loss(v)
        flat[i] = old - h
        lo = loss(v)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * h)
    return g.astype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
