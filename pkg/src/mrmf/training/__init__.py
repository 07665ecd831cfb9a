"""Stop conditions, single-phase training and the multi-fusion orchestrator."""

from .metrics import HEADER, MetricsRecord, read_metrics_csv, records_to_csv, write_metrics_csv
from .pipeline import (
    ConcurrencySettings,
    PhaseSettings,
    PipelineOptions,
    PipelineReport,
    StagePlan,
    StageReport,
    run_fusion_stage,
    run_pipeline,
    validate_schedule,
)
from .stop import StopCondition, reached_target, should_stop
from .trainer import OptimizerConfig, TrainJob, TrainResult, evaluate, train_until_stop

__all__ = [
    "HEADER", "MetricsRecord", "read_metrics_csv", "records_to_csv", "write_metrics_csv",
    "ConcurrencySettings", "PhaseSettings", "PipelineOptions", "PipelineReport", "StagePlan", "StageReport",
    "run_fusion_stage", "run_pipeline", "validate_schedule", "StopCondition", "reached_target", "should_stop",
    "OptimizerConfig", "TrainJob", "TrainResult", "evaluate", "train_until_stop",
]
