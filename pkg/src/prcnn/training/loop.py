from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from prcnn import model as M
from prcnn.audio_frontend import NormStats, Shard, normalize
from prcnn.errors import DatasetError, PrcnnError
from prcnn.tensor_core import make_rng
from prcnn.training import optim
from prcnn.training.checkpoint import Checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    clip_norm: float | None = None
    deterministic: bool = False
    micro_batch: int = 16  # bounds memory; the update changes only by rounding
    model: M.ModelConfig = field(default_factory=M.ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    train_accuracy: float
    wall_seconds: float

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "mean_loss": self.mean_loss,
             "train_accuracy": self.train_accuracy, "wall_seconds": self.wall_seconds}
        )


class TrainingDiverged(PrcnnError):
    """Raised when the loss stops being finite; carries the last good checkpoint."""

    def __init__(self, message, checkpoint: Checkpoint, metrics: list[EpochMetrics]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.metrics = metrics


def serial_section(enabled: bool):
    """Limit BLAS to one thread when deterministic execution is requested."""
    return threadpool_limits(1) if enabled else contextlib.nullcontext()


def batch_gradient(values, labels, idx, stats, params, mcfg, micro_batch):
    """Mean loss, correct-prediction count and mean-loss gradient over one batch.

    The batch is processed in chunks of ``micro_batch`` samples whose gradients
    are combined with weights ``len(chunk) / len(batch)``.
    """
    total = len(idx)
    grads = None
    loss_sum, correct = 0.0, 0
    for start in range(0, total, micro_batch):
        chunk = idx[start : start + micro_batch]
        x = normalize(values[chunk], stats)
        y = labels[chunk]
        probs, trace = M.model_forward(x, params, mcfg)
        loss_sum += M.model_loss(probs, y) * len(chunk)
        correct += int(np.sum(probs.argmax(axis=1) == y))
        g = M.model_backward(trace, y, params, mcfg)
        weight = len(chunk) / total
        if grads is None:
            grads = g
            for t in grads.tensors.values():
                t *= weight
        else:
            for name, t in grads.tensors.items():
                t += weight * g.tensors[name]
    return loss_sum / total, correct, grads


def train(train_shard: Shard, config: TrainConfig, params: M.ModelParams | None = None,
          on_epoch=None) -> tuple[Checkpoint, list[EpochMetrics]]:
    """Minibatch training with mean cross-entropy.

    ``on_epoch`` is called with each :class:`EpochMetrics` as it is produced.
    In deterministic mode ``wall_seconds`` is recorded as 0 so logs from
    repeated runs are byte-identical.
    """
    if len(train_shard) == 0:
        raise DatasetError("training shard is empty")
    mcfg = config.model
    if train_shard.class_count != mcfg.class_count:
        raise DatasetError(
            f"shard has {train_shard.class_count} classes but the model is configured for {mcfg.class_count}"
        )
    stats = NormStats.from_values(train_shard.values)
    rng = make_rng(config.seed)
    if params is None:
        params = M.init_params(mcfg, rng)
    state = optim.OptimizerState(config.optimizer, config.learning_rate, config.momentum)
    labels_all = train_shard.labels
    names = train_shard.label_names or [f"class{c:02d}" for c in range(mcfg.class_count)]

    def snapshot():
        return Checkpoint(mcfg, stats, list(names), params.copy())

    last_good = snapshot()
    metrics: list[EpochMetrics] = []
    with serial_section(config.deterministic):
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(len(train_shard))
            loss_sum, correct = 0.0, 0
            for b in range(0, len(order), config.batch_size):
                idx = np.sort(order[b : b + config.batch_size])
                loss, n_correct, grads = batch_gradient(
                    train_shard.values, labels_all, idx, stats, params, mcfg, config.micro_batch
                )
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss became {loss} at epoch {epoch}, batch {b // config.batch_size}",
                        last_good, metrics,
                    )
                if config.clip_norm is not None:
                    optim.clip_global_norm(grads, config.clip_norm)
                optim.apply(params, grads, state)
                loss_sum += loss * len(idx)
                correct += n_correct
            elapsed = 0.0 if config.deterministic else round(time.perf_counter() - start, 3)
            m = EpochMetrics(epoch, loss_sum / len(order), correct / len(order), elapsed)
            metrics.append(m)
            last_good = snapshot()
            log.info("epoch %d loss %.4f acc %.3f", epoch, m.mean_loss, m.train_accuracy)
            if on_epoch is not None:
                on_epoch(m)
    return last_good, metrics


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows = true class
    count: int
    aggregation: str

    def report(self, label_names=None) -> str:
        K = self.confusion.shape[0]
        names = list(label_names or [str(k) for k in range(K)])
        width = max(6, max(len(n) for n in names) + 1)
        lines = [f"accuracy: {self.accuracy:.6f} ({int(np.trace(self.confusion))}/{self.count}, {self.aggregation})",
                 "confusion (rows = true, cols = predicted):",
                 " " * width + "".join(f"{n[:width - 1]:>{width}}" for n in names)]
        for k in range(K):
            lines.append(f"{names[k]:<{width}}" + "".join(f"{v:>{width}d}" for v in self.confusion[k]))
        return "\n".join(lines)


def shard_probabilities(ckpt: Checkpoint, shard: Shard, batch_size: int = 16) -> np.ndarray:
    out = []
    for b in range(0, len(shard), batch_size):
        x = normalize(shard.values[b : b + batch_size], ckpt.norm_stats)
        out.append(M.model_forward(x, ckpt.params, ckpt.config)[0])
    return np.concatenate(out) if out else np.zeros((0, ckpt.config.class_count))


def aggregate_by_song(probs: np.ndarray, source_ids) -> dict[str, tuple[int, np.ndarray]]:
    """Majority vote of clip argmaxes per song; ties go to the largest summed probability."""
    groups: dict[str, list[int]] = {}
    for i, sid in enumerate(source_ids):
        groups.setdefault(sid, []).append(i)
    K = probs.shape[1]
    result = {}
    for sid, idx in groups.items():
        p = probs[idx]
        votes = np.bincount(p.argmax(axis=1), minlength=K)
        summed = p.sum(axis=0)
        tied = np.flatnonzero(votes == votes.max())
        winner = int(tied[np.argmax(summed[tied])])
        result[sid] = (winner, summed / len(idx))
    return result


def evaluate(ckpt: Checkpoint, shard: Shard, aggregation: str = "per_clip", probs=None) -> EvalResult:
    K = ckpt.config.class_count
    if shard.class_count != K:
        raise DatasetError(f"shard has {shard.class_count} classes, checkpoint expects {K}")
    if aggregation not in ("per_clip", "per_song_majority"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    if probs is None:
        probs = shard_probabilities(ckpt, shard)
    confusion = np.zeros((K, K), dtype=np.int64)
    if aggregation == "per_clip":
        for true, pred in zip(shard.labels, probs.argmax(axis=1)):
            confusion[true, pred] += 1
    else:
        truth = {}
        for sid, label in zip(shard.source_ids, shard.labels):
            truth.setdefault(sid, int(label))
        for sid, (pred, _) in aggregate_by_song(probs, shard.source_ids).items():
            confusion[truth[sid], pred] += 1
    total = int(confusion.sum())
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    return EvalResult(accuracy, confusion, total, aggregation)
