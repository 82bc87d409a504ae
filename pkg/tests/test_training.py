import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prcnn import model as M
from prcnn.audio_frontend import NormStats, Shard
from prcnn.errors import CorruptionError, DatasetError, StructuralError, VersionError
from prcnn.training import optim
from prcnn.training.checkpoint import (Checkpoint, checkpoint_bytes, load_checkpoint, parse_checkpoint,
                                       save_checkpoint)
from prcnn.training.loop import (EpochMetrics, TrainConfig, TrainingDiverged, aggregate_by_song, batch_gradient,
                                 evaluate, train)

REDUCED = M.ModelConfig.reduced()


def tiny_shard(n_per_class=2, classes=10, seed=0):
    """Random 16x32 inputs whose class shifts the mean of one row band."""
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    values = r.random((len(labels), 16, 32))
    for i, c in enumerate(labels):
        values[i, c % 16] += 3.0
    ids = [f"song{i // 2}" for i in range(len(labels))]
    return Shard(values, labels, ids, np.arange(len(labels)) % 2, classes, [f"g{c}" for c in range(classes)])


def single_param(value=0.0):
    return M.ModelParams({"w": np.array([value])})


# --- optimizers ---------------------------------------------------------------------


def test_sgd_examples():
    p = single_param()
    state = optim.OptimizerState("sgd", 0.1, momentum=0.0)
    optim.sgd_apply(p, single_param(1.0), state)
    assert p["w"][0] == pytest.approx(-0.1, abs=1e-15)
    p = single_param()
    state = optim.OptimizerState("sgd", 0.1, momentum=0.9)
    for _ in range(2):
        optim.sgd_apply(p, single_param(1.0), state)
    assert p["w"][0] == pytest.approx(-0.29, abs=1e-15)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_and_zero_lr_are_neutral(kind, rng):
    params = M.init_params(REDUCED, 0)
    before = params.flatten().copy()
    state = optim.OptimizerState(kind, 1e-3)
    for _ in range(3):
        optim.apply(params, params.zeros_like(), state)
    assert np.array_equal(params.flatten(), before)
    state = optim.OptimizerState(kind, 0.0)
    g = M.ModelParams.unflatten(REDUCED, rng.normal(size=before.size))
    optim.apply(params, g, state)
    assert np.array_equal(params.flatten(), before)


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), st.floats(1e-5, 1e-1))
def test_adam_first_step_moves_by_lr(g, lr):
    p = single_param(2.0)
    optim.adam_apply(p, single_param(g), optim.OptimizerState("adam", lr))
    delta = p["w"][0] - 2.0
    assert abs(abs(delta) - lr) <= lr * 1e-4
    assert np.sign(delta) == -np.sign(g)


def test_adam_first_step_scale_invariance(rng):
    g = rng.normal(size=5)
    a, b = M.ModelParams({"w": np.zeros(5)}), M.ModelParams({"w": np.zeros(5)})
    optim.adam_apply(a, M.ModelParams({"w": g}), optim.OptimizerState("adam", 1e-3))
    optim.adam_apply(b, M.ModelParams({"w": 250.0 * g}), optim.OptimizerState("adam", 1e-3))
    assert np.allclose(a["w"], b["w"], rtol=0, atol=1e-3 * 1e-6)


def test_parity_is_enforced():
    params = M.init_params(REDUCED, 0)
    other = M.init_params(M.ModelConfig.reduced(bgru_layers=1), 0)
    with pytest.raises(StructuralError):
        optim.apply(params, other, optim.OptimizerState())


def test_clip_global_norm():
    g = M.ModelParams({"a": np.array([3.0]), "b": np.array([4.0])})
    assert optim.clip_global_norm(g, 1.0) == 5.0
    assert np.allclose(np.concatenate([g["a"], g["b"]]), [0.6, 0.8])
    assert optim.clip_global_norm(g, 10.0) == pytest.approx(1.0)
    assert np.allclose(g["a"], [0.6])


# --- checkpoints --------------------------------------------------------------------


def make_ckpt(seed=0):
    return Checkpoint(REDUCED, NormStats(1.25, 3.5), ["rock", "jazz"] + [f"g{i}" for i in range(8)],
                      M.init_params(REDUCED, seed), extra={"note": "x"})


def test_checkpoint_roundtrip(tmp_path):
    ckpt = make_ckpt()
    path = tmp_path / "m.prcnn-ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert np.array_equal(back.params.flatten(), ckpt.params.flatten())
    assert back.config == ckpt.config
    assert (back.norm_stats, back.label_names, back.extra) == (ckpt.norm_stats, ckpt.label_names, ckpt.extra)
    data = path.read_bytes()
    assert data[:4] == b"PCKP"
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_checkpoint_corruption_and_version():
    data = checkpoint_bytes(make_ckpt())
    for cut in (10, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptionError):
            parse_checkpoint(data[:cut])
    flipped = bytearray(data)
    flipped[-20] ^= 0xFF
    with pytest.raises(CorruptionError, match="checksum"):
        parse_checkpoint(bytes(flipped))
    bumped = data[:4] + struct.pack("<I", 2) + data[8:]
    with pytest.raises(VersionError) as e:
        parse_checkpoint(bumped)
    assert "version 2" in str(e.value) and "version 1" in str(e.value)


# --- training loop ------------------------------------------------------------------


def reduced_config(**kw):
    return TrainConfig(**{"batch_size": 8, "epochs": 2, "deterministic": True, "model": REDUCED, **kw})


def test_memorizes_one_sample():
    # full default model and optimizer settings
    r = np.random.default_rng(0)
    shard = Shard(r.random((1, 128, 513)), np.array([3]), ["a"], np.array([0]), 10)
    losses = []
    ckpt, metrics = train(shard, TrainConfig(epochs=200, deterministic=True),
                          on_epoch=lambda m: losses.append(m.mean_loss))
    assert len(metrics) == 200 and [m.mean_loss for m in metrics] == losses
    assert metrics[-1].mean_loss < 0.01 < metrics[0].mean_loss
    assert metrics[-1].train_accuracy == 1.0


def test_training_is_deterministic():
    shard = tiny_shard()
    a, ma = train(shard, reduced_config(epochs=3))
    b, mb = train(shard, reduced_config(epochs=3))
    assert [m.to_json() for m in ma] == [m.to_json() for m in mb]
    assert all(m.wall_seconds == 0 for m in ma)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    c, _ = train(shard, reduced_config(epochs=3, seed=1))
    assert checkpoint_bytes(a) != checkpoint_bytes(c)


def test_zero_learning_rate_keeps_parameters():
    init = M.init_params(REDUCED, 7)
    ckpt, _ = train(tiny_shard(), reduced_config(learning_rate=0.0, optimizer="sgd"), params=init.copy())
    assert np.array_equal(ckpt.params.flatten(), init.flatten())


def test_metrics_json_keys():
    line = EpochMetrics(1, 0.5, 0.25, 0.0).to_json()
    assert line == '{"epoch": 1, "mean_loss": 0.5, "train_accuracy": 0.25, "wall_seconds": 0.0}'


def test_micro_batches_match_one_pass(rng):
    shard = tiny_shard()
    params = M.init_params(REDUCED, 3)
    stats = NormStats.from_values(shard.values)
    idx = np.arange(11)
    l1, c1, g1 = batch_gradient(shard.values, shard.labels, idx, stats, params, REDUCED, 3)
    l2, c2, g2 = batch_gradient(shard.values, shard.labels, idx, stats, params, REDUCED, 64)
    assert c1 == c2 and l1 == pytest.approx(l2, abs=1e-14)
    assert np.allclose(g1.flatten(), g2.flatten(), rtol=0, atol=1e-15)


def test_divergence_returns_last_good_checkpoint():
    init = M.init_params(REDUCED, 0)
    cfg = reduced_config(learning_rate=1e300, optimizer="sgd", epochs=3, batch_size=4)
    with pytest.raises(TrainingDiverged) as e:
        with np.errstate(all="ignore"):
            train(tiny_shard(), cfg, params=init.copy())
    assert np.array_equal(e.value.checkpoint.params.flatten(), init.flatten())
    assert e.value.metrics == []


def test_training_rejects_bad_shards():
    shard = tiny_shard(classes=4)
    with pytest.raises(DatasetError, match="4 classes"):
        train(shard, reduced_config())
    with pytest.raises(DatasetError):
        train(tiny_shard().subset([]), reduced_config())


# --- evaluation ---------------------------------------------------------------------


def eval_ckpt(params=None):
    return Checkpoint(REDUCED, NormStats(0.0, 1.0), [f"g{i}" for i in range(10)],
                      params or M.init_params(REDUCED, 0))


def test_perfect_model_gives_diagonal_confusion():
    shard = tiny_shard(3)
    oracle = np.eye(10)[shard.labels]
    result = evaluate(eval_ckpt(), shard, probs=oracle)
    assert result.accuracy == 1.0
    assert np.array_equal(result.confusion, np.diag(np.full(10, 3)))


def test_uniform_model_is_at_chance():
    shard = tiny_shard(4)
    result = evaluate(eval_ckpt(M.init_params(REDUCED, 0, "zeros")), shard)
    assert result.accuracy == pytest.approx(0.1)
    assert np.all(result.confusion[:, 0] == 4)


@given(st.integers(0, 2**32 - 1))
def test_confusion_accounting(seed):
    shard = tiny_shard(3, seed=seed % 1000)
    probs = np.random.default_rng(seed).dirichlet(np.ones(10), size=len(shard))
    result = evaluate(eval_ckpt(), shard, probs=probs)
    assert result.confusion.sum(axis=1).tolist() == [3] * 10
    assert result.accuracy == np.trace(result.confusion) / result.confusion.sum()
    assert "accuracy" in result.report() and result.count == 30


def test_song_majority_vote():
    probs = np.array([[0.6, 0.4], [0.45, 0.55], [0.3, 0.7], [0.9, 0.1], [0.2, 0.8]])
    ids = ["a", "a", "a", "b", "b"]
    votes = aggregate_by_song(probs, ids)
    assert votes["a"][0] == 1 and votes["b"][0] == 0  # b ties 1-1, larger summed probability wins
    assert np.allclose(votes["a"][1], probs[:3].mean(axis=0))
    shard = Shard(np.zeros((5, 16, 32)), np.array([1, 1, 1, 1, 1]), ids, np.arange(5), 2)
    ckpt = Checkpoint(M.ModelConfig.reduced(class_count=2), NormStats(0, 1), ["x", "y"],
                      M.init_params(M.ModelConfig.reduced(class_count=2), 0))
    result = evaluate(ckpt, shard, "per_song_majority", probs=probs)
    assert result.count == 2 and result.accuracy == 0.5
    assert result.confusion.tolist() == [[0, 0], [1, 1]]
