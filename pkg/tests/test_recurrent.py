import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from prcnn import recurrent as R
from prcnn.errors import ConsistencyError, DimensionError
from prcnn.recurrent import GRU_TENSORS, BgruLayer, GruParams

seeds = st.integers(0, 2**32 - 1)


def random_gru(r, D, H, scale=1.0):
    shapes = {"U": (H, D), "W": (H, H), "b": (H,)}
    return GruParams(**{n: r.normal(scale=scale, size=shapes[n.split("_")[0]]) for n in GRU_TENSORS})


def scalar_step(x, h_prev, p):
    """Element-by-element transcription of the gate equations with math-module scalars."""
    H, D = p.W.shape[0], p.U.shape[1]
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    u, r = [0.0] * H, [0.0] * H
    for i in range(H):
        su, sr = p.b_u[i], p.b_r[i]
        for j in range(D):
            su += p.U_u[i, j] * x[j]
            sr += p.U_r[i, j] * x[j]
        for j in range(H):
            su += p.W_u[i, j] * h_prev[j]
            sr += p.W_r[i, j] * h_prev[j]
        u[i], r[i] = sig(su), sig(sr)
    h = [0.0] * H
    for i in range(H):
        s = p.b[i]
        for j in range(D):
            s += p.U[i, j] * x[j]
        for j in range(H):
            s += p.W[i, j] * r[j] * h_prev[j]
        cand = math.tanh(s)
        h[i] = u[i] * cand + (1 - u[i]) * h_prev[i]
    return h


def scalar_run(seq, p, direction):
    T = len(seq)
    H = p.W.shape[0]
    states = [None] * T
    h = [0.0] * H
    order = range(T) if direction == "forward" else range(T - 1, -1, -1)
    for t in order:
        h = scalar_step(seq[t], h, p)
        states[t] = h
    return np.array(states)


def test_step_zero_params():
    p = GruParams.zeros(1, 1)
    h, gates = R.gru_step_forward_dir(np.zeros(1), np.array([1.0]), p)
    assert gates["u"][0] == 0.5 and gates["r"][0] == 0.5 and gates["cand"][0] == 0.0
    assert h.tolist() == [0.5]


def test_step_closed_update_gate_passes_memory(rng):
    p = GruParams.zeros(2, 3)
    p.b_u[:] = -1000.0
    h_prev = rng.normal(size=3)
    h, _ = R.gru_step_forward_dir(rng.normal(size=2), h_prev, p)
    assert np.max(np.abs(h - h_prev)) <= 1e-12


def test_step_matches_scalar_oracle(rng):
    p = random_gru(rng, 3, 4)
    x, h_prev = rng.normal(size=3), rng.normal(size=4)
    h, _ = R.gru_step_forward_dir(x, h_prev, p)
    assert np.max(np.abs(h - scalar_step(x, h_prev, p))) <= 1e-12


def test_step_dimension_errors(rng):
    p = random_gru(rng, 3, 4)
    with pytest.raises(DimensionError):
        R.gru_step_forward_dir(np.zeros(2), np.zeros(4), p)
    p.W_r = np.zeros((4, 3))
    with pytest.raises(DimensionError):
        R.gru_step_forward_dir(np.zeros(3), np.zeros(4), p)


def test_sigmoid_is_stable_at_extremes():
    out = R.sigmoid(np.array([-1e4, 0.0, 1e4]))
    assert out.tolist() == [0.0, 0.5, 1.0]


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), seeds, st.sampled_from(["forward", "backward"]))
def test_run_direction_matches_scalar_oracle(D, H, T, seed, direction):
    r = np.random.default_rng(seed)
    p = random_gru(r, D, H)
    seq = r.normal(size=(T, D))
    states, _ = R.gru_run_direction(seq, p, direction)
    assert np.max(np.abs(states - scalar_run(seq, p, direction))) <= 1e-12


def test_single_step_directions_agree(rng):
    p = random_gru(rng, 2, 3)
    seq = rng.normal(size=(1, 2))
    assert np.array_equal(R.gru_run_direction(seq, p, "forward")[0], R.gru_run_direction(seq, p, "backward")[0])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 8), seeds)
def test_reversal_identity_is_exact(D, H, T, seed):
    r = np.random.default_rng(seed)
    p = random_gru(r, D, H)
    seq = r.normal(size=(T, D))
    back, _ = R.gru_run_direction(seq, p, "backward")
    fwd_rev, _ = R.gru_run_direction(seq[::-1].copy(), p, "forward")
    assert np.array_equal(back, fwd_rev[::-1])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 8), seeds)
def test_gate_ranges_and_bounded_state(D, H, T, seed):
    r = np.random.default_rng(seed)
    p = random_gru(r, D, H, scale=0.5)
    _, trace = R.gru_run_direction(r.normal(size=(T, D)), p, "forward")
    assert np.all((trace.u > 0) & (trace.u < 1)) and np.all((trace.r > 0) & (trace.r < 1))
    assert np.all(np.abs(trace.cand) < 1)
    assert np.all(np.abs(trace.h) <= 1)


def test_bgru_zero_sequence_zero_params():
    layer = BgruLayer(GruParams.zeros(3, 2), GruParams.zeros(3, 2))
    states, summary, _ = R.bgru_layer_forward(np.zeros((5, 3)), layer)
    assert states.shape == (5, 4)
    assert np.array_equal(summary, np.zeros(4))


def test_bgru_summary_is_last_state_of_each_direction(rng):
    layer = BgruLayer(random_gru(rng, 2, 3), random_gru(rng, 2, 3))
    seq = rng.normal(size=(6, 2))
    states, summary, _ = R.bgru_layer_forward(seq, layer)
    assert np.array_equal(summary, np.concatenate([states[-1, :3], states[0, 3:]]))
    _, mean_summary, _ = R.bgru_layer_forward(seq, layer, "mean_over_time")
    assert np.allclose(mean_summary, states.mean(axis=0), atol=1e-15)


def test_palindrome_with_shared_params_gives_equal_summaries(rng):
    p = random_gru(rng, 2, 3)
    half = rng.normal(size=(3, 2))
    seq = np.concatenate([half, half[::-1]])
    _, summary, _ = R.bgru_layer_forward(seq, BgruLayer(p, p))
    assert np.array_equal(summary[:3], summary[3:])


def test_stacked_feature_size_for_default_hidden_size(rng):
    layers = [BgruLayer(random_gru(rng, 128, 64, 0.1), random_gru(rng, 128, 64, 0.1)),
              BgruLayer(random_gru(rng, 128, 64, 0.1), random_gru(rng, 128, 64, 0.1))]
    feature, _ = R.stacked_bgru_forward(rng.normal(size=(128, 128)), layers)
    assert feature.shape == (256,)


def test_stacked_zero_input_zero_params():
    layers = [BgruLayer(GruParams.zeros(4, 2), GruParams.zeros(4, 2)),
              BgruLayer(GruParams.zeros(4, 2), GruParams.zeros(4, 2))]
    feature, _ = R.stacked_bgru_forward(np.zeros((5, 4)), layers)
    assert np.array_equal(feature, np.zeros(8))


def test_stacked_matches_manual_composition(rng):
    l1 = BgruLayer(random_gru(rng, 3, 2), random_gru(rng, 3, 2))
    l2 = BgruLayer(random_gru(rng, 4, 2), random_gru(rng, 4, 2))
    seq = rng.normal(size=(5, 3))
    feature, _ = R.stacked_bgru_forward(seq, [l1, l2])
    f1, _ = R.gru_run_direction(seq, l1.forward_params, "forward")
    b1, _ = R.gru_run_direction(seq, l1.backward_params, "backward")
    mid = np.concatenate([f1, b1], axis=1)
    f2, _ = R.gru_run_direction(mid, l2.forward_params, "forward")
    b2, _ = R.gru_run_direction(mid, l2.backward_params, "backward")
    manual = np.concatenate([f1[-1], b1[0], f2[-1], b2[0]])
    assert np.array_equal(feature, manual)
    again, _ = R.stacked_bgru_forward(seq, [l1, l2])
    assert np.array_equal(feature, again)


def test_backward_zero_upstream_gives_zero_gradients(rng):
    layers = [BgruLayer(random_gru(rng, 3, 2), random_gru(rng, 3, 2))]
    feature, stack = R.stacked_bgru_forward(rng.normal(size=(4, 3)), layers)
    dx, grads = R.bgru_backward(stack, np.zeros_like(feature))
    assert not np.any(dx)
    assert all(not np.any(g) for pair in grads for d in pair for g in d.values())


def test_backward_rejects_mismatched_trace(rng):
    layers = [BgruLayer(random_gru(rng, 3, 2), random_gru(rng, 3, 2))]
    _, stack = R.stacked_bgru_forward(rng.normal(size=(4, 3)), layers)
    with pytest.raises(ConsistencyError):
        R.bgru_backward(stack, np.zeros(7))


def test_scalar_case_hand_derivative():
    # T=1, D=1, H=1, h0=0: h = u*tanh(b + U x), u = sigmoid(b_u + U_u x); reset gate has no effect
    vals = dict(U=0.7, W=0.3, b=-0.2, U_u=0.4, W_u=-0.5, b_u=0.1, U_r=0.9, W_r=0.2, b_r=-0.3)
    p = GruParams(**{k: np.array([[v]]) if k[0] in "UW" else np.array([v]) for k, v in vals.items()})
    x = 1.5
    layer = BgruLayer(p, GruParams.zeros(1, 1))
    feature, stack = R.stacked_bgru_forward(np.array([[x]]), [layer])
    _, grads = R.bgru_backward(stack, np.array([1.0, 0.0]))
    g = grads[0][0]
    a = vals["b"] + vals["U"] * x
    u = 1 / (1 + math.exp(-(vals["b_u"] + vals["U_u"] * x)))
    c = math.tanh(a)
    assert math.isclose(feature[0], u * c, rel_tol=1e-14)
    assert math.isclose(g["b"][0], u * (1 - c * c), rel_tol=1e-12)
    assert math.isclose(g["U"][0, 0], u * (1 - c * c) * x, rel_tol=1e-12)
    assert math.isclose(g["b_u"][0], c * u * (1 - u), rel_tol=1e-12)
    assert math.isclose(g["U_u"][0, 0], c * u * (1 - u) * x, rel_tol=1e-12)
    for name in ("W", "W_u", "W_r", "U_r", "b_r"):
        assert g[name].item() == 0.0


@pytest.mark.parametrize("layers,summary", [(1, "final_states"), (2, "final_states"), (2, "mean_over_time")])
@pytest.mark.parametrize("seed", range(4))
def test_bptt_matches_finite_differences(layers, summary, seed):
    r = np.random.default_rng(seed)
    T, D, H = 4, 3, 2
    stack_layers, d_in = [], D
    for _ in range(layers):
        stack_layers.append(BgruLayer(random_gru(r, d_in, H), random_gru(r, d_in, H)))
        d_in = 2 * H
    seq = r.normal(size=(T, D))
    up = r.normal(size=2 * H * layers)

    def loss(seq=seq, layers=stack_layers):
        return R.stacked_bgru_forward(seq, layers, summary)[0] @ up

    def replaced(i, direction, name, value):
        layers = list(stack_layers)
        fwd, bwd = layers[i].forward_params, layers[i].backward_params
        target = fwd if direction == "fwd" else bwd
        swapped = GruParams(**(target.as_dict() | {name: value}))
        layers[i] = BgruLayer(swapped, bwd) if direction == "fwd" else BgruLayer(fwd, swapped)
        return layers

    _, stack = R.stacked_bgru_forward(seq, stack_layers, summary)
    dx, grads = R.bgru_backward(stack, up)
    assert np.max(rel_err(dx, numeric_grad(lambda v: loss(seq=v), seq))) < 1e-6
    for i, (layer, pair) in enumerate(zip(stack_layers, grads)):
        for direction, params, g in (("fwd", layer.forward_params, pair[0]), ("bwd", layer.backward_params, pair[1])):
            for name in GRU_TENSORS:
                num = numeric_grad(lambda v: loss(layers=replaced(i, direction, name, v)), getattr(params, name))
                assert np.max(rel_err(g[name], num)) < 1e-6, f"layer {i + 1} {direction} {name}"


def test_batched_run_matches_per_sequence(rng):
    layers = [BgruLayer(random_gru(rng, 3, 2), random_gru(rng, 3, 2))]
    seqs = rng.normal(size=(3, 5, 3))
    feats, _ = R.stacked_bgru_forward(seqs, layers)
    for n in range(3):
        assert np.allclose(feats[n], R.stacked_bgru_forward(seqs[n], layers)[0], atol=1e-14)
