"""Feed-forward layers with hand-written backward passes.

All layers accept an optional run of leading batch axes, so ``[C, T, F]`` and
``[N, C, T, F]`` inputs go through the same code. Parameter gradients are
summed over the batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from prcnn.errors import ArgumentError, DimensionError
from prcnn.tensor_core import pad_axis


@dataclass
class ConvLayer:
    kernels: np.ndarray  # [out, in, kt, kf], one of (kt, kf) is 3 and the other 1
    bias: np.ndarray  # [out]

    @property
    def axis(self) -> str:
        kt, kf = self.kernels.shape[2:]
        if (kt, kf) == (3, 1):
            return "time"
        if (kt, kf) == (1, 3):
            return "frequency"
        raise DimensionError(f"kernel must be 3x1 or 1x3, got {kt}x{kf}")


@dataclass(frozen=True)
class PoolSpec:
    window: tuple[int, int]
    stride: tuple[int, int] | None = None

    def __post_init__(self):
        if self.stride is not None and tuple(self.stride) != tuple(self.window):
            raise ArgumentError("only non-overlapping pooling (stride == window) is supported")


@dataclass
class DenseLayer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]


@dataclass
class LayerCache:
    kind: str
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    saved: dict


# --- convolution ------------------------------------------------------------
#
# Kernels run channels-last ([N, T, F, C]) so a convolution is one GEMM over an
# im2col matrix of the three taps. The public functions take [..., C, T, F].


def conv_forward_cl(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, LayerCache]:
    """Channels-last convolution: ``[N, T, F, C_in] -> [N, T, F, C_out]``."""
    out_ch, in_ch = layer.kernels.shape[:2]
    if x.ndim != 4 or x.shape[-1] != in_ch:
        raise DimensionError(f"conv expects [N, T, F, {in_ch}] input, got {x.shape}")
    axis = 1 if layer.axis == "time" else 2
    N, T, F, _ = x.shape
    padded = pad_axis(x, 1, axis)
    col = np.concatenate([_tap(padded, k, axis, T, F) for k in range(3)], axis=-1)
    col = col.reshape(N * T * F, 3 * in_ch)
    out = col @ _kernel_matrix(layer.kernels) + layer.bias
    out = out.reshape(N, T, F, out_ch)
    cache = LayerCache("conv_cl", x.shape, out.shape, {"col": col, "layer": layer, "axis": axis})
    return out, cache


def conv_backward_cl(cache: LayerCache, upstream: np.ndarray):
    _check_upstream(cache, upstream)
    col, layer, axis = cache.saved["col"], cache.saved["layer"], cache.saved["axis"]
    out_ch, in_ch = layer.kernels.shape[:2]
    N, T, F, _ = cache.input_shape
    g = upstream.reshape(N * T * F, out_ch)
    d_matrix = col.T @ g
    d_kernels = d_matrix.reshape(3, in_ch, out_ch).transpose(2, 1, 0).reshape(layer.kernels.shape)
    d_col = (g @ _kernel_matrix(layer.kernels).T).reshape(N, T, F, 3, in_ch)
    pad_shape = list(cache.input_shape)
    pad_shape[axis] += 2
    d_padded = np.zeros(pad_shape)
    for k in range(3):
        _tap(d_padded, k, axis, T, F)[...] += d_col[..., k, :]
    dx = d_padded[:, 1:-1] if axis == 1 else d_padded[:, :, 1:-1]
    return dx, {"kernels": d_kernels, "bias": g.sum(axis=0)}


def _kernel_matrix(kernels: np.ndarray) -> np.ndarray:
    """``[O, C, 3]`` taps as a ``[3*C, O]`` matrix matching the im2col column order."""
    out_ch, in_ch = kernels.shape[:2]
    return kernels.reshape(out_ch, in_ch, 3).transpose(2, 1, 0).reshape(3 * in_ch, out_ch)


def _tap(padded: np.ndarray, k: int, axis: int, T: int, F: int) -> np.ndarray:
    if axis == 1:
        return padded[:, k : k + T]
    return padded[:, :, k : k + F]


def _to_cl(x: np.ndarray) -> np.ndarray:
    lead = x.shape[:-3]
    flat = x.reshape((-1,) + x.shape[-3:])
    return np.ascontiguousarray(flat.transpose(0, 2, 3, 1)), lead


def _from_cl(x: np.ndarray, lead) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)).reshape(lead + (x.shape[3], x.shape[1], x.shape[2]))


def conv_forward(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, LayerCache]:
    """Cross-correlate with a 3-tap kernel along one axis, zero-padded to keep extents.

    ``out[o,t,f] = bias[o] + sum_{c,dt} kernels[o,c,dt+1,0] * in[c,t+dt,f]`` for
    a time-axis (3x1) kernel; a 1x3 kernel does the same along frequency.
    """
    in_ch = layer.kernels.shape[1]
    if x.ndim < 3 or x.shape[-3] != in_ch:
        raise DimensionError(f"conv expects [..., {in_ch}, T, F] input, got {x.shape}")
    xc, lead = _to_cl(x)
    out, inner = conv_forward_cl(xc, layer)
    out = _from_cl(out, lead)
    return out, LayerCache("conv", x.shape, out.shape, {"inner": inner, "lead": lead})


def conv_backward(cache: LayerCache, upstream: np.ndarray):
    _check_upstream(cache, upstream)
    g, _ = _to_cl(upstream)
    dx, grads = conv_backward_cl(cache.saved["inner"], g)
    return _from_cl(dx, cache.saved["lead"]), grads


# --- max pooling ------------------------------------------------------------


def maxpool_forward_cl(x: np.ndarray, spec: PoolSpec) -> tuple[np.ndarray, LayerCache]:
    """Non-overlapping max pooling over axes 1 and 2 of ``[N, T, F, C]``.

    Rows/columns that do not fill a whole window are dropped. The cache keeps
    the in-window position (row-major) of each winner; ties go to the lowest
    position, i.e. the lowest flat index of the input.
    """
    h, w = spec.window
    N, T, F, C = x.shape
    To, Fo = T // h, F // w
    if To < 1 or Fo < 1:
        raise DimensionError(f"pool window {h}x{w} larger than input {T}x{F}")
    out = x[:, 0 : To * h : h, 0 : Fo * w : w].copy()
    winner = np.zeros(out.shape, dtype=np.int8 if h * w < 128 else np.int32)
    for k in range(1, h * w):
        i, j = divmod(k, w)
        candidate = x[:, i : To * h : h, j : Fo * w : w]
        better = candidate > out  # strict, so earlier positions keep ties
        np.copyto(out, candidate, where=better)
        np.copyto(winner, k, where=better)
    cache = LayerCache("maxpool_cl", x.shape, out.shape, {"winner": winner, "window": (h, w)})
    return out, cache


def maxpool_backward_cl(cache: LayerCache, upstream: np.ndarray):
    _check_upstream(cache, upstream)
    winner = cache.saved["winner"]
    h, w = cache.saved["window"]
    To, Fo = upstream.shape[1:3]
    dx = np.zeros(cache.input_shape)
    for k in range(h * w):
        i, j = divmod(k, w)
        dx[:, i : To * h : h, j : Fo * w : w] = np.where(winner == k, upstream, 0.0)
    return dx, {}


def maxpool_forward(x: np.ndarray, spec: PoolSpec) -> tuple[np.ndarray, LayerCache]:
    """Max pooling over the last two axes of ``[..., T, F]``."""
    if x.ndim < 2:
        raise DimensionError(f"pooling needs at least two axes, got {x.shape}")
    lead = x.shape[:-2]
    out, inner = maxpool_forward_cl(x.reshape((-1,) + x.shape[-2:] + (1,)), spec)
    out = out.reshape(lead + out.shape[1:3])
    return out, LayerCache("maxpool", x.shape, out.shape, {"inner": inner})


def maxpool_backward(cache: LayerCache, upstream: np.ndarray):
    _check_upstream(cache, upstream)
    inner = cache.saved["inner"]
    dx, _ = maxpool_backward_cl(inner, upstream.reshape(inner.output_shape))
    return dx.reshape(cache.input_shape), {}


# --- activations ------------------------------------------------------------


def relu(x: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    mask = x > 0
    return x * mask, LayerCache("relu", x.shape, x.shape, {"mask": mask})


def relu_backward(cache: LayerCache, upstream: np.ndarray):
    _check_upstream(cache, upstream)
    return upstream * cache.saved["mask"], {}


# --- dense ------------------------------------------------------------------


def dense_forward(x: np.ndarray, layer: DenseLayer) -> tuple[np.ndarray, LayerCache]:
    n_in = layer.weight.shape[1]
    if x.shape[-1] != n_in:
        raise DimensionError(f"dense layer expects {n_in} inputs, got shape {x.shape}")
    out = x @ layer.weight.T + layer.bias
    return out, LayerCache("dense", x.shape, out.shape, {"input": x, "layer": layer})


def dense_backward(cache: LayerCache, upstream: np.ndarray):
    _check_upstream(cache, upstream)
    x, layer = cache.saved["input"], cache.saved["layer"]
    g2 = upstream.reshape(-1, upstream.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grads = {"weight": g2.T @ x2, "bias": g2.sum(axis=0)}
    return upstream @ layer.weight, grads


# --- classifier output ------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    K = probs.shape[-1]
    if not 0 <= label < K:
        raise ArgumentError(f"label {label} outside [0, {K})")
    return float(-np.log(probs[..., label]))


def softmax_cross_entropy_grad(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of the cross-entropy loss with respect to the logits."""
    labels = np.asarray(labels)
    K = probs.shape[-1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise ArgumentError(f"labels must lie in [0, {K}), got {labels}")
    return probs - np.eye(K)[labels]


_BACKWARD = {
    "conv": conv_backward,
    "conv_cl": conv_backward_cl,
    "maxpool": maxpool_backward,
    "maxpool_cl": maxpool_backward_cl,
    "relu": relu_backward,
    "dense": dense_backward,
}


def layer_backward(cache: LayerCache, upstream: np.ndarray):
    """Dispatch to the backward pass matching ``cache.kind``."""
    return _BACKWARD[cache.kind](cache, upstream)


def _check_upstream(cache: LayerCache, upstream: np.ndarray) -> None:
    if tuple(upstream.shape) != tuple(cache.output_shape):
        raise DimensionError(
            f"{cache.kind} backward: upstream shape {upstream.shape} != forward output {cache.output_shape}"
        )
