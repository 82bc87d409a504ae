"""Array primitives shared by every layer.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in C (row-major)
order. The helpers here add the shape checks and the deterministic
initialisation the layers rely on; everything else is ordinary numpy.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from prcnn.errors import DimensionError

DTYPE = np.float64


def as_tensor(values) -> np.ndarray:
    t = np.ascontiguousarray(values, dtype=DTYPE)
    if t.ndim == 0:
        t = t.reshape(1)
    if 0 in t.shape:
        raise DimensionError(f"tensor extents must be >= 1, got shape {t.shape}")
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def map_elementwise(t: np.ndarray, f: Callable[[float], float]) -> np.ndarray:
    """Apply a scalar function to every element.

    ``f`` may also be a numpy ufunc, in which case it is applied vectorised.
    """
    if isinstance(f, np.ufunc):
        return np.asarray(f(t), dtype=DTYPE)
    out = np.fromiter((f(float(x)) for x in t.ravel()), dtype=DTYPE, count=t.size)
    return out.reshape(t.shape)


def zip_elementwise(a: np.ndarray, b: np.ndarray, f: Callable[[float, float], float]) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise operands differ in shape: {a.shape} vs {b.shape}")
    if isinstance(f, np.ufunc):
        return np.asarray(f(a, b), dtype=DTYPE)
    out = np.fromiter(
        (f(float(x), float(y)) for x, y in zip(a.ravel(), b.ravel())), dtype=DTYPE, count=a.size
    )
    return out.reshape(a.shape)


def pad_axis(t: np.ndarray, amount: int, axis: int) -> np.ndarray:
    if amount < 0:
        raise DimensionError(f"padding amount must be >= 0, got {amount}")
    if amount == 0:
        return t
    widths = [(0, 0)] * t.ndim
    widths[axis] = (amount, amount)
    return np.pad(t, widths)


def pad_time_axis(t: np.ndarray, amount: int) -> np.ndarray:
    """Zero-pad the time axis of a ``[C, T, F]`` (or batched ``[..., C, T, F]``) tensor."""
    if t.ndim < 3:
        raise DimensionError(f"expected [C, T, F] input, got shape {t.shape}")
    return pad_axis(t, amount, axis=-2)


def crop_time_axis(t: np.ndarray, amount: int) -> np.ndarray:
    if amount == 0:
        return t
    return t[..., amount:-amount, :]


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[1], shape[0]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.uint64(seed))


def random_init(shape, scheme: str = "uniform-scaled", seed=0, fan_in=None, fan_out=None) -> np.ndarray:
    """Initialise a tensor.

    ``uniform-scaled`` draws from U(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
    Fans default to the usual reading of ``shape``: ``[out, in]`` for matrices,
    ``[out, in, *kernel]`` for convolution kernels.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if not shape or min(shape) < 1:
        raise DimensionError(f"invalid shape {shape}")
    if scheme == "zeros":
        return np.zeros(shape, dtype=DTYPE)
    if scheme != "uniform-scaled":
        raise ValueError(f"unknown init scheme {scheme!r}")
    default_in, default_out = _fans(shape)
    fan_in = default_in if fan_in is None else fan_in
    fan_out = default_out if fan_out is None else fan_out
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return make_rng(seed).uniform(-s, s, size=shape).astype(DTYPE)
