"""The parallel CNN / bidirectional-GRU classifier.

A spectrogram ``[T, F]`` feeds two branches side by side:

* CNN branch: five (conv 3-tap -> ReLU -> max-pool) stages, flattened.
* RNN branch: frequency max-pool 1x2, per-frame linear embedding, then one
  or two stacked bidirectional GRU layers whose summaries are spliced.

The two feature vectors are fused (concatenation or sum) and mapped to class
probabilities by a dense layer and softmax.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from prcnn import nn_layers, recurrent
from prcnn.errors import ArgumentError, DimensionError, StructuralError
from prcnn.nn_layers import ConvLayer, DenseLayer, PoolSpec
from prcnn.recurrent import GRU_TENSORS, BgruLayer, GruParams
from prcnn.tensor_core import make_rng, random_init


@dataclass
class ModelConfig:
    fusion_mode: str = "concat"
    conv_axis: str = "time"
    bgru_layers: int = 1
    hidden_size: int = 64
    class_count: int = 10
    summary_mode: str = "final_states"
    input_shape: tuple[int, int] = (128, 513)
    conv_filters: tuple[int, ...] = (16, 32, 64, 128, 64)
    pools: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (2, 2), (4, 4), (4, 4))
    rnn_pool: tuple[int, int] = (1, 2)
    embed_dim: int = 128

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.conv_filters = tuple(self.conv_filters)
        self.pools = tuple(tuple(p) for p in self.pools)
        self.rnn_pool = tuple(self.rnn_pool)
        if self.class_count < 2:
            raise ArgumentError("class_count must be >= 2")
        if self.hidden_size < 1:
            raise ArgumentError("hidden_size must be >= 1")
        if self.fusion_mode not in ("add", "concat"):
            raise ArgumentError(f"fusion_mode must be 'add' or 'concat', got {self.fusion_mode!r}")
        if self.conv_axis not in ("time", "frequency"):
            raise ArgumentError(f"conv_axis must be 'time' or 'frequency', got {self.conv_axis!r}")
        if self.bgru_layers not in (1, 2):
            raise ArgumentError("bgru_layers must be 1 or 2")
        if self.summary_mode not in ("final_states", "mean_over_time"):
            raise ArgumentError(f"unknown summary_mode {self.summary_mode!r}")
        if len(self.conv_filters) != len(self.pools):
            raise ArgumentError("need one pool per convolution")
        if self.fusion_mode == "add" and self.cnn_feature_size != self.rnn_feature_size:
            raise ArgumentError(
                f"add fusion needs equal branch sizes, got cnn={self.cnn_feature_size} rnn={self.rnn_feature_size}"
            )

    @classmethod
    def reduced(cls, **overrides) -> "ModelConfig":
        """Small model used by the gradient check: 16x32 input, 2 filters per conv, H=3."""
        settings = dict(
            input_shape=(16, 32),
            conv_filters=(2, 2, 2, 2, 2),
            pools=((2, 2), (2, 2), (2, 2), (2, 2), (1, 2)),
            hidden_size=3,
            embed_dim=8,
            bgru_layers=2,
        )
        settings.update(overrides)
        return cls(**settings)

    def cnn_shapes(self) -> list[tuple[int, int, int]]:
        """Activation shape ``[C, T, F]`` after each conv-pool stage."""
        T, F = self.input_shape
        shapes = []
        for filters, (h, w) in zip(self.conv_filters, self.pools):
            T, F = T // h, F // w
            if T < 1 or F < 1:
                raise DimensionError(f"pooling chain collapses input {self.input_shape}")
            shapes.append((filters, T, F))
        return shapes

    @property
    def cnn_feature_size(self) -> int:
        return int(np.prod(self.cnn_shapes()[-1]))

    @property
    def pooled_shape(self) -> tuple[int, int]:
        return self.input_shape[0] // self.rnn_pool[0], self.input_shape[1] // self.rnn_pool[1]

    @property
    def rnn_feature_size(self) -> int:
        return self.bgru_layers * 2 * self.hidden_size

    @property
    def fused_size(self) -> int:
        if self.fusion_mode == "add":
            return self.cnn_feature_size
        return self.cnn_feature_size + self.rnn_feature_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter tensor, in canonical flattening order."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = 1
    kernel = (3, 1) if config.conv_axis == "time" else (1, 3)
    for i, filters in enumerate(config.conv_filters, start=1):
        shapes[f"conv{i}.kernels"] = (filters, in_ch) + kernel
        shapes[f"conv{i}.bias"] = (filters,)
        in_ch = filters
    E = config.embed_dim
    shapes["embedding.weight"] = (E, config.pooled_shape[1])
    shapes["embedding.bias"] = (E,)
    D, H = E, config.hidden_size
    for layer in range(1, config.bgru_layers + 1):
        for direction in ("fwd", "bwd"):
            for name in GRU_TENSORS:
                kind = name.split("_")[0]
                shapes[f"bgru{layer}.{direction}.{name}"] = {"U": (H, D), "W": (H, H), "b": (H,)}[kind]
        D = 2 * H
    shapes["head.weight"] = (config.class_count, config.fused_size)
    shapes["head.bias"] = (config.class_count,)
    return shapes


@dataclass
class ModelParams:
    """Named parameter tensors kept in canonical order.

    Gradients use the same container, so optimizers and the gradient check
    treat both uniformly through :meth:`flatten`.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def conv(self, i: int) -> ConvLayer:
        return ConvLayer(self.tensors[f"conv{i}.kernels"], self.tensors[f"conv{i}.bias"])

    def embedding(self) -> DenseLayer:
        return DenseLayer(self.tensors["embedding.weight"], self.tensors["embedding.bias"])

    def head(self) -> DenseLayer:
        return DenseLayer(self.tensors["head.weight"], self.tensors["head.bias"])

    def bgru(self, layer: int) -> BgruLayer:
        def gru(direction):
            return GruParams(**{n: self.tensors[f"bgru{layer}.{direction}.{n}"] for n in GRU_TENSORS})

        return BgruLayer(gru("fwd"), gru("bwd"))

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @classmethod
    def unflatten(cls, config: ModelConfig, flat: np.ndarray) -> "ModelParams":
        shapes = param_shapes(config)
        expected = sum(int(np.prod(s)) for s in shapes.values())
        if flat.size != expected:
            raise StructuralError(f"flat vector has {flat.size} values, model needs {expected}")
        tensors, offset = {}, 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            tensors[name] = np.array(flat[offset : offset + n], dtype=np.float64).reshape(shape)
            offset += n
        return cls(tensors)

    def owner_of(self, flat_index: int) -> str:
        offset = 0
        for name, t in self.tensors.items():
            if flat_index < offset + t.size:
                return name
            offset += t.size
        raise IndexError(flat_index)

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def check_parity(self, other: "ModelParams") -> None:
        if list(self.tensors) != list(other.tensors):
            raise StructuralError("parameter and gradient records name different tensors")
        for name, t in self.tensors.items():
            if t.shape != other.tensors[name].shape:
                raise StructuralError(f"{name}: shape {t.shape} vs {other.tensors[name].shape}")


def init_params(config: ModelConfig, seed=0, scheme: str = "uniform-scaled") -> ModelParams:
    """Fan-scaled uniform weights, zero biases, drawn in canonical order from one stream."""
    rng = make_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        is_bias = name.endswith("bias") or name.split(".")[-1].startswith("b")
        kind = "zeros" if (is_bias or scheme == "zeros") else "uniform-scaled"
        tensors[name] = random_init(shape, kind, rng)
    return ModelParams(tensors)


@dataclass
class ForwardTrace:
    batched: bool
    cnn_caches: list
    cnn_out_shape: tuple
    rnn_pool_cache: nn_layers.LayerCache
    embed_cache: nn_layers.LayerCache
    stack: recurrent.StackTrace
    cnn_feature: np.ndarray
    rnn_feature: np.ndarray
    fused: np.ndarray
    head_cache: nn_layers.LayerCache
    logits: np.ndarray
    probs: np.ndarray
    intermediate_shapes: dict = field(default_factory=dict)


def _check_input(spec: np.ndarray, config: ModelConfig) -> tuple[np.ndarray, bool]:
    batched = spec.ndim == 3
    x = spec if batched else spec[None]
    if x.ndim != 3 or tuple(x.shape[1:]) != tuple(config.input_shape):
        raise DimensionError(f"expected spectrogram of shape {config.input_shape}, got {spec.shape}")
    return x, batched


def cnn_block_forward(spec: np.ndarray, params: ModelParams, config: ModelConfig):
    """``[N, T, F]`` spectrograms -> ``[N, 256]`` CNN features plus layer caches.

    Runs channels-last internally; the feature is flattened in ``[C, T, F]``
    order. ReLU is applied after pooling: the two commute exactly (values and
    gradient routing) and the pooled tensor is 4-16x smaller.
    """
    x = spec[..., None]
    caches = []
    shapes = []
    for i, window in enumerate(config.pools, start=1):
        x, c_conv = nn_layers.conv_forward_cl(x, params.conv(i))
        x, c_pool = nn_layers.maxpool_forward_cl(x, PoolSpec(window))
        x, c_relu = nn_layers.relu(x)
        caches.append((c_conv, c_pool, c_relu))
        shapes.append((x.shape[3], x.shape[1], x.shape[2]))
    out_shape = x.shape
    feature = x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1)
    return feature, caches, out_shape, shapes


def cnn_block_backward(caches, out_shape, d_feature, grads: dict) -> None:
    N, T, F, C = out_shape
    g = np.ascontiguousarray(d_feature.reshape(N, C, T, F).transpose(0, 2, 3, 1))
    for i in range(len(caches), 0, -1):
        c_conv, c_pool, c_relu = caches[i - 1]
        g, _ = nn_layers.relu_backward(c_relu, g)
        g, _ = nn_layers.layer_backward(c_pool, g)
        g, pg = nn_layers.layer_backward(c_conv, g)
        grads[f"conv{i}.kernels"] = pg["kernels"]
        grads[f"conv{i}.bias"] = pg["bias"]


def birnn_block_forward(spec: np.ndarray, params: ModelParams, config: ModelConfig):
    """``[T, F]`` (optionally batched) -> spliced BGRU feature plus traces."""
    pooled, pool_cache = nn_layers.maxpool_forward(spec, PoolSpec(config.rnn_pool))
    embedded, embed_cache = nn_layers.dense_forward(pooled, params.embedding())
    layers = [params.bgru(i) for i in range(1, config.bgru_layers + 1)]
    feature, stack = recurrent.stacked_bgru_forward(embedded, layers, config.summary_mode)
    shapes = {"rnn_pooled": pooled.shape[-2:], "rnn_embedded": embedded.shape[-2:]}
    return feature, (pool_cache, embed_cache, stack), shapes


def birnn_block_backward(pool_cache, embed_cache, stack, d_feature, config: ModelConfig, grads: dict):
    d_embedded, layer_grads = recurrent.bgru_backward(stack, d_feature)
    for i, (g_fwd, g_bwd) in enumerate(layer_grads, start=1):
        for name in GRU_TENSORS:
            grads[f"bgru{i}.fwd.{name}"] = g_fwd[name]
            grads[f"bgru{i}.bwd.{name}"] = g_bwd[name]
    d_pooled, pg = nn_layers.dense_backward(embed_cache, d_embedded)
    grads["embedding.weight"] = pg["weight"]
    grads["embedding.bias"] = pg["bias"]
    # the spectrogram is an input, not a parameter; its gradient is not needed
    return d_pooled


def fuse(cnn_feat: np.ndarray, rnn_feat: np.ndarray, mode: str) -> np.ndarray:
    if mode == "add":
        if cnn_feat.shape != rnn_feat.shape:
            raise DimensionError(f"add fusion needs equal shapes, got {cnn_feat.shape} and {rnn_feat.shape}")
        return cnn_feat + rnn_feat
    if mode == "concat":
        if cnn_feat.shape[:-1] != rnn_feat.shape[:-1]:
            raise DimensionError(f"cannot concatenate {cnn_feat.shape} and {rnn_feat.shape}")
        return np.concatenate([cnn_feat, rnn_feat], axis=-1)
    raise ArgumentError(f"unknown fusion mode {mode!r}")


def fuse_backward(d_fused: np.ndarray, cnn_size: int, mode: str):
    if mode == "add":
        return d_fused, d_fused
    return d_fused[..., :cnn_size], d_fused[..., cnn_size:]


def model_forward(spec: np.ndarray, params: ModelParams, config: ModelConfig):
    """Class probabilities for one spectrogram ``[T, F]`` or a batch ``[N, T, F]``."""
    x, batched = _check_input(spec, config)
    cnn_feat, cnn_caches, cnn_out_shape, cnn_shapes = cnn_block_forward(x, params, config)
    rnn_feat, (pool_cache, embed_cache, stack), rnn_shapes = birnn_block_forward(x, params, config)
    fused = fuse(cnn_feat, rnn_feat, config.fusion_mode)
    logits, head_cache = nn_layers.dense_forward(fused, params.head())
    probs = nn_layers.softmax(logits)
    shapes = {"cnn_stages": cnn_shapes, "cnn_feature": cnn_feat.shape[-1:], "rnn_feature": rnn_feat.shape[-1:]}
    shapes.update(rnn_shapes)
    shapes["fused"] = fused.shape[-1:]
    trace = ForwardTrace(
        batched, cnn_caches, cnn_out_shape, pool_cache, embed_cache, stack,
        cnn_feat, rnn_feat, fused, head_cache, logits, probs, shapes,
    )
    return (probs if batched else probs[0]), trace


def model_loss(probs: np.ndarray, labels) -> float:
    """Mean cross-entropy over a batch (or the loss of a single sample)."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(picked)))


def model_backward(trace: ForwardTrace, labels, params: ModelParams, config: ModelConfig) -> ModelParams:
    """Gradient of the mean cross-entropy loss with respect to every parameter."""
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    N = trace.probs.shape[0]
    if labels.shape != (N,):
        raise ArgumentError(f"expected {N} labels, got {labels.shape}")
    d_logits = nn_layers.softmax_cross_entropy_grad(trace.probs, labels) / N
    grads: dict[str, np.ndarray] = {}
    d_fused, pg = nn_layers.dense_backward(trace.head_cache, d_logits)
    d_cnn, d_rnn = fuse_backward(d_fused, trace.cnn_feature.shape[-1], config.fusion_mode)
    cnn_block_backward(trace.cnn_caches, trace.cnn_out_shape, d_cnn, grads)
    birnn_block_backward(trace.rnn_pool_cache, trace.embed_cache, trace.stack, d_rnn, config, grads)
    grads["head.weight"] = pg["weight"]
    grads["head.bias"] = pg["bias"]
    out = ModelParams({name: grads[name] for name in params.tensors})
    params.check_parity(out)
    return out


def predict(spec: np.ndarray, params: ModelParams, config: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Probabilities for a stack of spectrograms, evaluated in chunks."""
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim == 2:
        return model_forward(spec, params, config)[0]
    out = [model_forward(spec[i : i + batch_size], params, config)[0] for i in range(0, len(spec), batch_size)]
    return np.concatenate(out, axis=0)
