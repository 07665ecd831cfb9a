"""Single-phase training loop: shuffled mini-batches until the stop condition fires."""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..data.dataset import Dataset
from ..errors import NonFiniteGradientError, ShapeError, TrainingAborted
from ..nn.loss import mse_loss
from ..nn.model import Model
from ..nn.optim import OptimizerState
from ..parallel import WorkerGroup, parallel_step
from .metrics import MetricsRecord
from .stop import StopCondition, reached_target, should_stop

# Nominal throughput behind the "modeled" clock: multiply-adds per second.
MODELED_MACS_PER_SECOND = 1e9
EVAL_CHUNK = 256


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def make(self) -> OptimizerState:
        return OptimizerState(self.kind, self.lr, self.momentum, self.beta1, self.beta2, self.eps)


@dataclass
class TrainResult:
    model: Model
    records: list = field(default_factory=list)
    stopped_by: str = ""

    @property
    def epochs(self) -> int:
        return len(self.records)

    @property
    def train_losses(self) -> list:
        return [r.train_loss for r in self.records]

    @property
    def val_losses(self) -> list:
        return [r.val_loss for r in self.records]

    @property
    def seconds(self) -> float:
        return sum(r.epoch_seconds for r in self.records)

    @property
    def final_val_loss(self):
        return self.records[-1].val_loss if self.records else None

    @property
    def best_val_loss(self):
        return min(self.val_losses) if self.records else None


def evaluate(model: Model, data: Dataset, chunk: int = EVAL_CHUNK) -> float:
    """Eval-mode MSE over the whole dataset."""
    total = 0.0
    for start in range(0, len(data), chunk):
        x = data.samples[start:start + chunk]
        y = data.labels[start:start + chunk]
        out, _ = model.forward(x, train=False)
        total += mse_loss(out, y)[0] * len(x)
    return total / len(data)


def epoch_batches(perm, batch_size: int, workers: int) -> list:
    """Split an epoch permutation into mini-batches; a tail too small to feed
    every worker is folded into the previous batch."""
    batches = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < workers:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train_until_stop(model: Model, train: Dataset, val: Dataset | None, cond: StopCondition,
                     optimizer: OptimizerConfig = OptimizerConfig(), seed: int = 0, batch_size: int = 32,
                     workers: int = 1, stage: int = 0, phase: str = "finetune", timing: str = "wall",
                     cancel: threading.Event | None = None) -> TrainResult:
    """Train ``model`` in place until ``cond`` fires; one metrics record per epoch.

    ``timing="modeled"`` replaces wall-clock epoch times with a deterministic
    estimate from the model's multiply-add count, so that metrics files are
    byte-reproducible.
    """
    if train.sample_shape != model.input_shape:
        raise ShapeError(f"dataset sample shape {train.sample_shape} != model input shape {model.input_shape}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(train) < workers:
        raise ValueError(f"{len(train)} training samples cannot feed {workers} workers")
    if timing not in ("wall", "modeled"):
        raise ValueError("timing must be 'wall' or 'modeled'")
    val = val if val is not None else train

    rng = np.random.default_rng(seed)
    result = TrainResult(model)
    history: list[float] = []
    n = len(train)
    modeled = 3.0 * model.flops_per_sample() * n / MODELED_MACS_PER_SECOND

    with WorkerGroup(model, workers, optimizer.make()) as group:
        while True:
            if result.records and reached_target(result.records[-1].val_loss, cond):
                result.stopped_by = "target"
                break
            if should_stop(history, cond):
                result.stopped_by = "max_epochs" if len(history) >= cond.max_epochs else "plateau"
                break
            if cancel is not None and cancel.is_set():
                raise TrainingAborted(f"{phase} training cancelled", {"stage": stage, "phase": phase,
                                                                      "epoch": len(history)}, result.records)
            epoch = len(history) + 1
            t0 = time.perf_counter()
            perm = rng.permutation(n)
            acc = 0.0
            for b, idx in enumerate(epoch_batches(perm, batch_size, workers)):
                try:
                    step = parallel_step(group, train.samples[idx], train.labels[idx])
                except NonFiniteGradientError as exc:
                    raise TrainingAborted(str(exc), _diagnostic(stage, phase, epoch, b, str(exc), history),
                                          result.records) from exc
                if not math.isfinite(step.loss):
                    raise TrainingAborted(f"non-finite training loss in epoch {epoch}",
                                          _diagnostic(stage, phase, epoch, b, "non-finite loss", history),
                                          result.records)
                acc += step.loss * len(idx)
            train_loss = acc / n
            elapsed = time.perf_counter() - t0
            val_loss = evaluate(model, val)
            if not math.isfinite(val_loss):
                raise TrainingAborted(f"non-finite validation loss in epoch {epoch}",
                                      _diagnostic(stage, phase, epoch, None, "non-finite validation loss", history),
                                      result.records)
            seconds = modeled if timing == "modeled" else max(elapsed, 1e-9)
            result.records.append(MetricsRecord(stage, phase, epoch, train_loss, val_loss, seconds, n / seconds))
            history.append(train_loss)
    return result


def _diagnostic(stage, phase, epoch, batch, reason, history):
    return {"stage": stage, "phase": phase, "epoch": epoch, "batch": batch, "reason": reason,
            "train_loss_history": list(history)}


@dataclass
class TrainJob:
    """A fully specified training run, callable as ``job(workers, cancel)``."""

    model: Model
    train: Dataset
    val: Dataset | None
    cond: StopCondition
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0
    batch_size: int = 32
    stage: int = 0
    phase: str = "coarse"
    timing: str = "wall"

    def __call__(self, workers: int = 1, cancel=None) -> TrainResult:
        return train_until_stop(self.model, self.train, self.val, self.cond, self.optimizer, self.seed,
                                self.batch_size, workers, self.stage, self.phase, self.timing, cancel)

    def with_model(self, model: Model) -> "TrainJob":
        return replace(self, model=model)
