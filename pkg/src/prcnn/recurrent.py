"""GRU cells, bidirectional layers and backpropagation through time.

Gate convention (the update gate weights the *candidate*):

    u  = sigmoid(b_u + U_u x + W_u h_prev)
    r  = sigmoid(b_r + U_r x + W_r h_prev)
    c  = tanh(b + U x + W (r * h_prev))
    h  = u * c + (1 - u) * h_prev

The reverse direction uses identical formulas, carrying the state from t+1.
It is evaluated as the forward recurrence over the time-reversed sequence,
which makes the reversal identity hold bit-for-bit.

Sequences are ``[T, D]`` or batched ``[N, T, D]``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from prcnn.errors import ArgumentError, ConsistencyError, DimensionError

# canonical order used for flattening
GRU_TENSORS = ("U", "W", "b", "U_u", "W_u", "b_u", "U_r", "W_r", "b_r")


@dataclass
class GruParams:
    U: np.ndarray
    W: np.ndarray
    b: np.ndarray
    U_u: np.ndarray
    W_u: np.ndarray
    b_u: np.ndarray
    U_r: np.ndarray
    W_r: np.ndarray
    b_r: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0]

    @property
    def input_size(self) -> int:
        return self.U.shape[1]

    def check(self) -> None:
        H, D = self.hidden_size, self.input_size
        for name in ("U", "U_u", "U_r"):
            if getattr(self, name).shape != (H, D):
                raise DimensionError(f"{name} must be [{H}x{D}], got {getattr(self, name).shape}")
        for name in ("W", "W_u", "W_r"):
            if getattr(self, name).shape != (H, H):
                raise DimensionError(f"{name} must be [{H}x{H}], got {getattr(self, name).shape}")
        for name in ("b", "b_u", "b_r"):
            if getattr(self, name).shape != (H,):
                raise DimensionError(f"{name} must be [{H}], got {getattr(self, name).shape}")

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "GruParams":
        H, D = hidden_size, input_size
        shapes = {"U": (H, D), "W": (H, H), "b": (H,)}
        return cls(**{name: np.zeros(shapes[name.split("_")[0]]) for name in GRU_TENSORS})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class BgruLayer:
    forward_params: GruParams
    backward_params: GruParams


@dataclass
class GruTrace:
    """Per-step activations of one direction, stored in processing order."""

    direction: str
    x: np.ndarray  # [N, T, D]
    h_prev: np.ndarray  # [N, T, H]
    u: np.ndarray
    r: np.ndarray
    cand: np.ndarray
    h: np.ndarray
    params: GruParams


@dataclass
class BgruTrace:
    forward: GruTrace
    backward: GruTrace
    summary_mode: str


@dataclass
class StackTrace:
    layers: list[BgruTrace]
    batched: bool
    feature_size: int


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gru_step_forward_dir(x: np.ndarray, h_prev: np.ndarray, p: GruParams):
    """One GRU update. Returns the new state and a dict of the gate activations."""
    p.check()
    if x.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden_size:
        raise DimensionError(
            f"step expects x[..., {p.input_size}] and h[..., {p.hidden_size}], got {x.shape}, {h_prev.shape}"
        )
    u = sigmoid(p.b_u + x @ p.U_u.T + h_prev @ p.W_u.T)
    r = sigmoid(p.b_r + x @ p.U_r.T + h_prev @ p.W_r.T)
    cand = np.tanh(p.b + x @ p.U.T + (r * h_prev) @ p.W.T)
    h = u * cand + (1.0 - u) * h_prev
    return h, {"x": x, "h_prev": h_prev, "u": u, "r": r, "cand": cand, "h": h}


def _run_forward_time(seq: np.ndarray, p: GruParams, h0: np.ndarray, direction: str) -> GruTrace:
    N, T, _ = seq.shape
    H = p.hidden_size
    # input projections for all timesteps at once
    xu = seq @ p.U_u.T + p.b_u
    xr = seq @ p.U_r.T + p.b_r
    xc = seq @ p.U.T + p.b
    dtype = np.result_type(seq, h0, *p.as_dict().values())
    h_prev, u, r, cand, h = (np.empty((N, T, H), dtype=dtype) for _ in range(5))
    WuT, WrT, WT = p.W_u.T, p.W_r.T, p.W.T
    state = h0
    for t in range(T):
        h_prev[:, t] = state
        ut = sigmoid(xu[:, t] + state @ WuT)
        rt = sigmoid(xr[:, t] + state @ WrT)
        ct = np.tanh(xc[:, t] + (rt * state) @ WT)
        state = ut * ct + (1.0 - ut) * state
        u[:, t], r[:, t], cand[:, t], h[:, t] = ut, rt, ct, state
    return GruTrace(direction, seq, h_prev, u, r, cand, h, p)


def gru_run_direction(seq: np.ndarray, p: GruParams, direction: str = "forward", h0=None):
    """Run one direction over a sequence.

    Returns ``(states, trace)``; ``states[t]`` is the activation at time t in
    the original time order for both directions.
    """
    if direction not in ("forward", "backward"):
        raise ArgumentError(f"direction must be 'forward' or 'backward', got {direction!r}")
    p.check()
    batched = seq.ndim == 3
    s = seq if batched else seq[None]
    if s.ndim != 3 or s.shape[-1] != p.input_size:
        raise DimensionError(f"sequence must be [T, {p.input_size}] (optionally batched), got {seq.shape}")
    N = s.shape[0]
    H = p.hidden_size
    if h0 is None:
        h0 = np.zeros((N, H))
    else:
        h0 = np.broadcast_to(h0, (N, H))
    # a contiguous copy keeps the reversed run bit-identical to a forward run on reversed data
    s = np.ascontiguousarray(s[:, ::-1] if direction == "backward" else s)
    trace = _run_forward_time(s, p, h0, direction)
    states = trace.h if direction == "forward" else trace.h[:, ::-1]
    return (states if batched else states[0]), trace


def gru_direction_backward(trace: GruTrace, d_states: np.ndarray):
    """BPTT for one direction.

    ``d_states`` is ``[N, T, H]`` in original time order. Returns the input
    gradient (original time order) and a dict of parameter gradients.
    """
    p = trace.params
    if d_states.shape != trace.h.shape:
        raise ConsistencyError(f"state gradient {d_states.shape} does not match trace {trace.h.shape}")
    if trace.direction == "backward":
        d_states = d_states[:, ::-1]
    N, T, H = trace.h.shape
    x = trace.x
    da_u = np.empty((N, T, H))
    da_r = np.empty((N, T, H))
    da_c = np.empty((N, T, H))
    carry = np.zeros((N, H))
    for t in range(T - 1, -1, -1):
        u, r, c, hp = trace.u[:, t], trace.r[:, t], trace.cand[:, t], trace.h_prev[:, t]
        dh = d_states[:, t] + carry
        dac = dh * u * (1.0 - c * c)
        dau = dh * (c - hp) * u * (1.0 - u)
        d_rh = dac @ p.W
        dar = d_rh * hp * r * (1.0 - r)
        carry = dh * (1.0 - u) + d_rh * r + dau @ p.W_u + dar @ p.W_r
        da_u[:, t], da_r[:, t], da_c[:, t] = dau, dar, dac

    def flat(a):
        return a.reshape(N * T, -1)

    x2, hp2, rh2 = flat(x), flat(trace.h_prev), flat(trace.r * trace.h_prev)
    au, ar, ac = flat(da_u), flat(da_r), flat(da_c)
    grads = {
        "U": ac.T @ x2,
        "W": ac.T @ rh2,
        "b": ac.sum(axis=0),
        "U_u": au.T @ x2,
        "W_u": au.T @ hp2,
        "b_u": au.sum(axis=0),
        "U_r": ar.T @ x2,
        "W_r": ar.T @ hp2,
        "b_r": ar.sum(axis=0),
    }
    dx = da_c @ p.U + da_u @ p.U_u + da_r @ p.U_r
    if trace.direction == "backward":
        dx = dx[:, ::-1]
    return dx, grads


def _summarize(fwd: np.ndarray, bwd: np.ndarray, mode: str) -> np.ndarray:
    if mode == "final_states":
        return np.concatenate([fwd[:, -1], bwd[:, 0]], axis=-1)
    if mode == "mean_over_time":
        return np.concatenate([fwd.mean(axis=1), bwd.mean(axis=1)], axis=-1)
    raise ArgumentError(f"unknown summary mode {mode!r}")


def bgru_layer_forward(seq: np.ndarray, layer: BgruLayer, summary_mode: str = "final_states"):
    """Both directions over the same input; returns (states, summary, trace)."""
    batched = seq.ndim == 3
    s = seq if batched else seq[None]
    fwd_states, fwd_trace = gru_run_direction(s, layer.forward_params, "forward")
    bwd_states, bwd_trace = gru_run_direction(s, layer.backward_params, "backward")
    states = np.concatenate([fwd_states, bwd_states], axis=-1)
    summary = _summarize(fwd_states, bwd_states, summary_mode)
    trace = BgruTrace(fwd_trace, bwd_trace, summary_mode)
    if not batched:
        return states[0], summary[0], trace
    return states, summary, trace


def bgru_layer_backward(trace: BgruTrace, d_states: np.ndarray, d_summary: np.ndarray):
    """Gradient through one bidirectional layer (batched arrays only)."""
    H = trace.forward.params.hidden_size
    T = trace.forward.h.shape[1]
    d_fwd = d_states[..., :H].copy()
    d_bwd = d_states[..., H:].copy()
    if trace.summary_mode == "final_states":
        d_fwd[:, -1] += d_summary[:, :H]
        d_bwd[:, 0] += d_summary[:, H:]
    else:
        d_fwd += d_summary[:, None, :H] / T
        d_bwd += d_summary[:, None, H:] / T
    dx_f, g_f = gru_direction_backward(trace.forward, d_fwd)
    dx_b, g_b = gru_direction_backward(trace.backward, d_bwd)
    return dx_f + dx_b, (g_f, g_b)


def stacked_bgru_forward(seq: np.ndarray, layers: list[BgruLayer], summary_mode: str = "final_states"):
    """Stack bidirectional layers; the feature splices every layer's summary."""
    if not layers:
        raise ArgumentError("at least one BGRU layer is required")
    batched = seq.ndim == 3
    current = seq if batched else seq[None]
    summaries, traces = [], []
    for layer in layers:
        current, summary, trace = bgru_layer_forward(current, layer, summary_mode)
        summaries.append(summary)
        traces.append(trace)
    feature = np.concatenate(summaries, axis=-1)
    stack = StackTrace(traces, batched, feature.shape[-1])
    return (feature if batched else feature[0]), stack


def bgru_backward(stack: StackTrace, upstream_feature_grad: np.ndarray):
    """BPTT through a stack of bidirectional layers.

    Returns the gradient with respect to the input sequence and a list with a
    ``(forward_grads, backward_grads)`` pair per layer.
    """
    g = upstream_feature_grad if stack.batched else upstream_feature_grad[None]
    if g.ndim != 2 or g.shape[-1] != stack.feature_size:
        raise ConsistencyError(
            f"feature gradient {upstream_feature_grad.shape} does not match trace feature size {stack.feature_size}"
        )
    if g.shape[0] != stack.layers[0].forward.h.shape[0]:
        raise ConsistencyError("feature gradient batch size does not match the trace")
    sizes = [2 * t.forward.params.hidden_size for t in stack.layers]
    offsets = np.cumsum([0] + sizes)
    layer_grads = [None] * len(stack.layers)
    d_states = None
    for i in range(len(stack.layers) - 1, -1, -1):
        trace = stack.layers[i]
        d_summary = g[:, offsets[i] : offsets[i + 1]]
        if d_states is None:
            d_states = np.zeros(trace.forward.h.shape[:2] + (sizes[i],))
        d_states, layer_grads[i] = bgru_layer_backward(trace, d_states, d_summary)
    dx = d_states if stack.batched else d_states[0]
    return dx, layer_grads
