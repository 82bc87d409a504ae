import numpy as np
import pytest

from prcnn import model as M
from prcnn import nn_layers
from prcnn.errors import ArgumentError
from prcnn.training import gradcheck as gc


def test_reduced_model_passes_in_float64():
    report = gc.gradient_check()
    assert report.n_checked == report.n_total == 746
    assert report.precision == "float64" and report.epsilon == 1e-6
    assert report.passed and report.max_rel_error < 1e-5, report.format()
    assert report.format().endswith("PASS (tolerance 1e-05)")


def test_report_names_owning_layer():
    report = gc.gradient_check(sample=60, seed=2)
    cfg = M.ModelConfig.reduced()
    assert report.worst_layer == M.init_params(cfg, 0).owner_of(report.worst_index)
    assert report.worst_layer in report.format()
    assert set(report.per_layer) <= set(M.param_shapes(cfg))


def test_inverted_relu_mask_is_detected(monkeypatch):
    def broken(cache, upstream):
        return upstream * ~cache.saved["mask"], {}

    monkeypatch.setattr(nn_layers, "relu_backward", broken)
    report = gc.gradient_check(sample=120)
    assert report.max_rel_error > 1e-2
    assert not report.passed
    assert report.worst_layer.startswith("conv")


@pytest.mark.parametrize("seed", range(6))
def test_extended_precision_passes_across_seeds(seed):
    report = gc.gradient_check(seed=seed, precision="extended", sample=200)
    assert report.max_rel_error < 1e-5, report.format()


def test_check_instance_exercises_every_tensor():
    cfg = M.ModelConfig.reduced()
    for seed in range(10):
        params, x, labels = gc.check_instance(cfg, seed)
        _, trace = M.model_forward(x, params, cfg)
        grads = M.model_backward(trace, labels, params, cfg)
        assert all(np.any(g) for g in grads.tensors.values())
    a, b = gc.check_instance(cfg, 4), gc.check_instance(cfg, 4)
    assert np.array_equal(a[0].flatten(), b[0].flatten()) and np.array_equal(a[1], b[1])


def test_loss_difference_matches_direct_subtraction(rng):
    zp, zm = rng.normal(size=(2, 10)), rng.normal(size=(2, 10))
    labels = [3, 7]

    def ce(z):
        return np.mean([np.log(np.sum(np.exp(r))) - r[y] for r, y in zip(z, labels)])

    assert abs(gc.loss_difference(zp, zm, labels) - (ce(zp) - ce(zm))) < 1e-13


def test_relative_error_and_arguments():
    assert gc.relative_error(0.0, 0.0) == 0.0
    assert gc.relative_error(1.0, 1.0) == 0.0
    assert gc.relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    with pytest.raises(ArgumentError):
        gc.gradient_check(precision="half")
    with pytest.raises(ArgumentError):
        gc.gradient_check(epsilon=0.0)
