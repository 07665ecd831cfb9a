"""Fusion stages and the multi-stage orchestrator.

A stage trains a coarse model on data reduced by ``coarse_factors`` and,
independently, a freshly initialised dense model on data reduced by
``dense_factors``; the two are fused and the result becomes the next stage's
coarse model. After the last stage the fused model is finetuned on the
original data. An empty schedule is plain baseline training.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

from ..checkpoint import save_checkpoint
from ..data.dataset import Dataset
from ..data.resolution import check_factors, downsample_dataset, reduced_shape
from ..errors import ShapeError
from ..fusion import adjust_model, fuse, with_input_pooling
from ..nn.model import Model
from ..parallel import AllocationInput, allocate_workers, concurrent_stage
from .stop import StopCondition
from .trainer import OptimizerConfig, TrainJob, TrainResult, train_until_stop


@dataclass(frozen=True)
class PhaseSettings:
    stop: StopCondition
    batch_size: int = 32
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.workers < 1:
            raise ValueError("batch_size and workers must be >= 1")


@dataclass(frozen=True)
class StagePlan:
    coarse_factors: tuple
    dense_factors: tuple
    coarse: PhaseSettings
    dense: PhaseSettings

    def __post_init__(self):
        object.__setattr__(self, "coarse_factors", tuple(int(k) for k in self.coarse_factors))
        object.__setattr__(self, "dense_factors", tuple(int(k) for k in self.dense_factors))
        if len(self.coarse_factors) != len(self.dense_factors):
            raise ValueError("coarse and dense factors need the same number of axes")
        if min(self.coarse_factors + self.dense_factors) < 1:
            raise ValueError("resolution factors must be >= 1")
        if not math.prod(self.coarse_factors) > math.prod(self.dense_factors):
            raise ValueError(f"coarse factors {self.coarse_factors} must be strictly coarser than {self.dense_factors}")


@dataclass(frozen=True)
class ConcurrencySettings:
    """Concurrent coarse/dense training inside each stage.

    When ``t_dense``/``t_coarse`` are omitted they are estimated from a
    one-epoch calibration run per resolution times each phase's epoch cap.
    """

    enabled: bool = False
    total_workers: int = 2
    t_dense: float | None = None
    t_coarse: float | None = None
    granularity: int = 1

    def __post_init__(self):
        if self.total_workers < 2:
            raise ValueError("total_workers must be >= 2")
        g = self.granularity
        if g < 1 or self.total_workers % g or self.total_workers < 2 * g:
            raise ValueError(f"{self.total_workers} workers cannot be split into two groups of multiples of {g}")
        if any(t is not None and not t > 0 for t in (self.t_dense, self.t_coarse)):
            raise ValueError("t_dense and t_coarse must be > 0")


@dataclass(frozen=True)
class PipelineOptions:
    timing: str = "wall"
    coarse_path: str = "cpu"          # "gpu": pool inside the model instead of pre-reducing data
    reinit_first_fc: bool = False
    concurrency: ConcurrencySettings = ConcurrencySettings()
    out_dir: str | None = None

    def __post_init__(self):
        if self.coarse_path not in ("cpu", "gpu"):
            raise ValueError("coarse_path must be 'cpu' or 'gpu'")


@dataclass
class StageReport:
    stage: int
    coarse_factors: tuple
    dense_factors: tuple
    coarse_epochs: int
    dense_epochs: int
    coarse_train_loss: float | None
    coarse_val_loss: float | None
    dense_train_loss: float | None
    dense_val_loss: float | None
    coarse_seconds: float
    dense_seconds: float
    fusion_seconds: float
    wall_seconds: float
    allocation: tuple | None = None
    checkpoint: str | None = None


@dataclass
class PipelineReport:
    stages: list
    finetune_epochs: int
    finetune_seconds: float
    final_val_loss: float | None
    best_val_loss: float | None
    records: list = field(default_factory=list)
    wall_seconds: float = 0.0
    checkpoint: str | None = None

    @property
    def total_seconds(self) -> float:
        return sum(r.epoch_seconds for r in self.records)

    @property
    def coarse_epochs(self) -> int:
        return sum(s.coarse_epochs for s in self.stages)

    @property
    def dense_pre_epochs(self) -> int:
        return sum(s.dense_epochs for s in self.stages)

    @property
    def original_resolution_epochs(self) -> int:
        """Epochs spent on full-resolution data: dense pretraining at factor 1 plus finetuning."""
        dense = sum(s.dense_epochs for s in self.stages if all(k == 1 for k in s.dense_factors))
        return dense + self.finetune_epochs


def _last(values):
    return values[-1] if values else None


def estimate_seconds(job: TrainJob) -> float:
    """Wall seconds of one epoch on a throwaway copy, times the job's epoch cap."""
    probe = TrainJob(job.model.copy(), job.train, job.val,
                     StopCondition(job.cond.epsilon, job.cond.patience, 1), job.optimizer, job.seed,
                     job.batch_size, job.stage, job.phase, "wall")
    res = probe(1)
    return max(res.seconds, 1e-9) * max(job.cond.max_epochs, 1)


def run_fusion_stage(coarse_model: Model, plan: StagePlan, train: Dataset, val: Dataset | None,
                     reference: Model, stage: int = 0, options: PipelineOptions = PipelineOptions(),
                     dense_model: Model | None = None):
    """Train coarse and dense models for one stage and fuse them.

    The dense model is freshly initialised from ``reference`` unless
    ``dense_model`` is given. Returns ``(fused_model, StageReport, records)``;
    ``coarse_model`` (and a given ``dense_model``) are trained in place.
    """
    t_stage = time.perf_counter()
    dense_train = downsample_dataset(train, plan.dense_factors)
    dense_val = downsample_dataset(val, plan.dense_factors) if val is not None else None
    coarse_shape = reduced_shape(train.sample_shape, plan.coarse_factors)
    if coarse_model.input_shape != coarse_shape:
        raise ShapeError(f"coarse model input {coarse_model.input_shape} does not match stage resolution {coarse_shape}")

    if options.coarse_path == "gpu":
        coarse_job_model = with_input_pooling(coarse_model, plan.coarse_factors, train.sample_shape)
        coarse_train, coarse_val = train, val
    else:
        coarse_job_model = coarse_model
        coarse_train = downsample_dataset(train, plan.coarse_factors)
        coarse_val = downsample_dataset(val, plan.coarse_factors) if val is not None else None

    if dense_model is None:
        dense_model = adjust_model(reference, dense_train.sample_shape, seed=plan.dense.seed)
    elif dense_model.input_shape != dense_train.sample_shape:
        raise ShapeError(f"dense model input {dense_model.input_shape} does not match stage resolution "
                         f"{dense_train.sample_shape}")
    coarse_job = TrainJob(coarse_job_model, coarse_train, coarse_val, plan.coarse.stop, plan.coarse.optimizer,
                          plan.coarse.seed, plan.coarse.batch_size, stage, "coarse", options.timing)
    dense_job = TrainJob(dense_model, dense_train, dense_val, plan.dense.stop, plan.dense.optimizer,
                         plan.dense.seed, plan.dense.batch_size, stage, "dense", options.timing)

    conc = options.concurrency
    allocation = None
    if conc.enabled:
        t_d = conc.t_dense if conc.t_dense is not None else estimate_seconds(dense_job)
        t_c = conc.t_coarse if conc.t_coarse is not None else estimate_seconds(coarse_job)
        allocation = allocate_workers(AllocationInput(t_d, t_c, conc.total_workers), conc.granularity)
        out = concurrent_stage(coarse_job, dense_job, allocation, concurrent=True)
        coarse_res, dense_res = out.coarse.result, out.dense.result
    else:
        coarse_res = coarse_job(plan.coarse.workers)
        dense_res = dense_job(plan.dense.workers)

    t_fuse = time.perf_counter()
    fused = fuse(coarse_model, dense_model, reinit_first_fc=options.reinit_first_fc, seed=plan.dense.seed + 1)
    # Forward probe: the fused model must accept dense-resolution input.
    fused.forward(dense_train.samples[:1], train=False)
    fusion_seconds = time.perf_counter() - t_fuse

    ckpt = None
    if options.out_dir:
        ckpt = os.path.join(options.out_dir, f"stage{stage}_fused.mrc")
        save_checkpoint(fused, ckpt)

    report = StageReport(
        stage, plan.coarse_factors, plan.dense_factors, coarse_res.epochs, dense_res.epochs,
        _last(coarse_res.train_losses), _last(coarse_res.val_losses),
        _last(dense_res.train_losses), _last(dense_res.val_losses),
        coarse_res.seconds, dense_res.seconds, fusion_seconds, time.perf_counter() - t_stage, allocation, ckpt,
    )
    return fused, report, coarse_res.records + dense_res.records


def validate_schedule(plans, sample_shape) -> None:
    spatial = sample_shape[:-1]
    for s, plan in enumerate(plans):
        check_factors(spatial, plan.coarse_factors)
        check_factors(spatial, plan.dense_factors)
        if s > 0 and plans[s - 1].dense_factors != plan.coarse_factors:
            raise ValueError(
                f"stage {s} coarse factors {plan.coarse_factors} must equal stage {s - 1} dense factors "
                f"{plans[s - 1].dense_factors}"
            )
    if plans and any(k != 1 for k in plans[-1].dense_factors):
        raise ValueError("the last stage must have all-1 dense factors (original resolution)")


def run_pipeline(reference: Model, plans, finetune: PhaseSettings, train: Dataset, val: Dataset | None,
                 options: PipelineOptions = PipelineOptions()):
    """Run every stage in order, then finetune at original resolution.

    ``reference`` is the original-resolution model; it is not modified. With
    no stages this is baseline training of a copy of ``reference``. Returns
    ``(final_model, PipelineReport)``.
    """
    plans = list(plans)
    validate_schedule(plans, train.sample_shape)
    if reference.input_shape != train.sample_shape:
        raise ShapeError(f"reference model input {reference.input_shape} != data shape {train.sample_shape}")
    t0 = time.perf_counter()
    records, stages = [], []

    if plans:
        model = adjust_model(reference, reduced_shape(train.sample_shape, plans[0].coarse_factors),
                             seed=plans[0].coarse.seed)
        for s, plan in enumerate(plans):
            model, report, recs = run_fusion_stage(model, plan, train, val, reference, s, options)
            stages.append(report)
            records.extend(recs)
    else:
        model = reference.copy()

    result: TrainResult = train_until_stop(
        model, train, val, finetune.stop, finetune.optimizer, finetune.seed, finetune.batch_size,
        finetune.workers, len(plans), "finetune", options.timing,
    )
    records.extend(result.records)

    ckpt = None
    if options.out_dir:
        ckpt = os.path.join(options.out_dir, "final.mrc")
        save_checkpoint(model, ckpt)
    report = PipelineReport(stages, result.epochs, result.seconds, result.final_val_loss, result.best_val_loss,
                            records, time.perf_counter() - t0, ckpt)
    return model, report
