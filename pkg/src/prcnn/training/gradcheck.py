"""Finite-difference verification of the analytic model gradient.

The numeric side is the central difference ``(L(p + eps) - L(p - eps)) / 2eps``
for one coordinate at a time. The loss difference is formed from the two logit
vectors directly (``log1p``/``expm1``) instead of subtracting two rounded loss
values, which removes the largest rounding term without changing the quantity
being estimated.

With ``precision="extended"`` the perturbed forward passes run in
``numpy.longdouble``. Coordinates whose true gradient is below about 1e-5 sit
close to the 64-bit roundoff floor of the difference quotient, so extended
precision gives a seed-independent verdict. The analytic gradient is always
computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from prcnn import model as M
from prcnn.errors import ArgumentError
from prcnn.tensor_core import make_rng

PRECISIONS = {"float64": np.float64, "extended": np.longdouble}


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    worst_layer: str
    worst_analytic: float
    worst_numeric: float
    n_checked: int
    n_total: int
    epsilon: float
    precision: str
    tolerance: float
    per_layer: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def format(self) -> str:
        lines = [
            f"checked {self.n_checked} of {self.n_total} parameters "
            f"(eps={self.epsilon:g}, {self.precision})",
            f"max relative error: {self.max_rel_error:.3e} at index {self.worst_index} ({self.worst_layer}); "
            f"analytic {self.worst_analytic:.6e}, numeric {self.worst_numeric:.6e}",
        ]
        for name, err in self.per_layer.items():
            lines.append(f"  {name:<20} {err:.3e}")
        lines.append(("PASS" if self.passed else "FAIL") + f" (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def check_instance(config: M.ModelConfig, seed=0, batch: int = 1, attempts: int = 100):
    """Parameters, input and labels for a check.

    Biases are drawn uniformly from [-1, 1] rather than left at zero so that
    ReLUs and gates sit away from their symmetric points. Draws continue from
    the same stream until every parameter tensor receives a nonzero gradient;
    otherwise a dead ReLU path would make the check vacuous for its layers.
    """
    rng = make_rng(seed)
    for _ in range(attempts):
        params = M.init_params(config, rng)
        for name, t in params.tensors.items():
            if name.rsplit(".", 1)[-1].startswith("b"):
                t[...] = rng.uniform(-1.0, 1.0, size=t.shape)
        x = rng.normal(size=(batch,) + tuple(config.input_shape))
        labels = rng.integers(0, config.class_count, size=batch)
        _, trace = M.model_forward(x, params, config)
        grads = M.model_backward(trace, labels, params, config)
        if all(np.any(g) for g in grads.tensors.values()):
            return params, x, labels
    raise ArgumentError(f"no instance with a gradient in every tensor after {attempts} draws")


def loss_difference(z_plus: np.ndarray, z_minus: np.ndarray, labels) -> float:
    """Mean cross-entropy of ``z_plus`` minus that of ``z_minus``, without cancellation."""
    total = 0.0
    for zp, zm, y in zip(z_plus, z_minus, labels):
        e = np.exp(zm - zm.max())
        total += np.log1p(np.sum(e * np.expm1(zp - zm)) / e.sum()) - (zp[y] - zm[y])
    return total / len(labels)


def gradient_check(config: M.ModelConfig | None = None, seed=0, epsilon: float = 1e-6,
                   precision: str = "float64", sample: int | None = None,
                   tolerance: float = 1e-5, batch: int = 1) -> GradCheckReport:
    """Compare analytic and central-difference gradients.

    ``sample`` limits the check to a seeded random subset of coordinates; by
    default every parameter is checked.
    """
    if precision not in PRECISIONS:
        raise ArgumentError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")
    if epsilon <= 0:
        raise ArgumentError("epsilon must be positive")
    config = config or M.ModelConfig.reduced()
    dtype = PRECISIONS[precision]
    params, x, labels = check_instance(config, seed, batch)

    _, trace = M.model_forward(x, params, config)
    analytic = M.model_backward(trace, labels, params, config).flatten()
    flat = params.flatten().astype(dtype)
    xd = x.astype(dtype)

    n_total = flat.size
    if sample is None or sample >= n_total:
        coords = np.arange(n_total)
    else:
        coords = np.sort(make_rng(seed).choice(n_total, size=sample, replace=False))

    def logits(vec):
        tensors = {}
        offset = 0
        for name, shape in M.param_shapes(config).items():
            n = int(np.prod(shape))
            tensors[name] = vec[offset : offset + n].reshape(shape)
            offset += n
        return M.model_forward(xd, M.ModelParams(tensors), config)[1].logits

    worst = (-1.0, -1, 0.0, 0.0)
    per_layer: dict[str, float] = {}
    eps = dtype(epsilon)
    for i in coords:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        step = plus[i] - minus[i]  # the step actually taken after rounding
        numeric = float(loss_difference(logits(plus), logits(minus), labels) / step)
        err = relative_error(float(analytic[i]), numeric)
        owner = params.owner_of(int(i))
        per_layer[owner] = max(per_layer.get(owner, 0.0), err)
        if err > worst[0]:
            worst = (err, int(i), float(analytic[i]), numeric)
    err, idx, a, n = worst
    return GradCheckReport(err, idx, params.owner_of(idx), a, n, len(coords), n_total,
                           epsilon, precision, tolerance, per_layer)
