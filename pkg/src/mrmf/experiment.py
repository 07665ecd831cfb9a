"""Run a configured experiment end to end and write its artifacts.

Output directory layout::

    metrics.csv          one row per epoch of every phase
    summary.json         epoch counts per phase, seconds, losses, per-section detail
    stage<s>_fused.mrc   fused model after each fusion stage (mrmf mode)
    final.mrc            the trained model
    abort.json           diagnostic record, only when training aborted
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import replace

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .errors import FileIOError, TrainingAborted
from .training.metrics import write_metrics_csv
from .training.pipeline import PipelineReport, run_pipeline
from .training.trainer import evaluate, train_until_stop

MODES = ("baseline", "mrmf")


def _prepare_dir(out_dir: str) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise FileIOError(f"cannot create output directory {out_dir}: {exc}") from None


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig, mode: str, out_dir: str, timing: str | None = None) -> dict:
    """Train per ``cfg`` in ``mode`` and write artifacts into ``out_dir``; returns the summary dict.

    On a training abort the metrics gathered so far and ``abort.json`` are
    written before the exception propagates.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    _prepare_dir(out_dir)
    options = replace(cfg.options, out_dir=out_dir, timing=timing or cfg.options.timing)
    train, val, test = cfg.splits()
    reference = cfg.build_reference(train.sample_shape)
    ft = cfg.finetune
    t0 = time.perf_counter()
    try:
        if mode == "baseline":
            model = reference.copy()
            res = train_until_stop(model, train, val, ft.stop, ft.optimizer, ft.seed, ft.batch_size, ft.workers,
                                   0, "finetune", options.timing)
            ckpt = os.path.join(out_dir, "final.mrc")
            save_checkpoint(model, ckpt)
            report = PipelineReport([], res.epochs, res.seconds, res.final_val_loss, res.best_val_loss,
                                    res.records, time.perf_counter() - t0, ckpt)
        else:
            model, report = run_pipeline(reference, cfg.stages, ft, train, val, options)
    except TrainingAborted as exc:
        write_metrics_csv(exc.records, os.path.join(out_dir, "metrics.csv"))
        path = os.path.join(out_dir, "abort.json")
        _write_json(path, {"message": str(exc), "diagnostic": exc.diagnostic})
        exc.diagnostic_path = path
        raise

    write_metrics_csv(report.records, os.path.join(out_dir, "metrics.csv"))
    summary = build_summary(cfg, mode, report, options.timing)
    summary["test_loss"] = evaluate(model, test) if test is not None else None
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def build_summary(cfg: ExperimentConfig, mode: str, report: PipelineReport, timing: str) -> dict:
    ft_records = [r for r in report.records if r.phase == "finetune"]
    target = cfg.finetune.stop.target_loss
    sections = []
    for st in report.stages:
        sections.append({
            "section": f"stage {st.stage}",
            "coarse_factors": list(st.coarse_factors),
            "dense_factors": list(st.dense_factors),
            "coarse_epochs": st.coarse_epochs,
            "dense_epochs": st.dense_epochs,
            "coarse_seconds": st.coarse_seconds,
            "dense_seconds": st.dense_seconds,
            "coarse_val_loss": st.coarse_val_loss,
            "dense_val_loss": st.dense_val_loss,
            "allocation": list(st.allocation) if st.allocation else None,
            "checkpoint": os.path.basename(st.checkpoint) if st.checkpoint else None,
        })
    sections.append({
        "section": "finetune",
        "epochs": report.finetune_epochs,
        "seconds": report.finetune_seconds,
        "val_loss": report.final_val_loss,
        "best_val_loss": report.best_val_loss,
    })
    reached = None
    if target is not None:
        reached = any(r.val_loss <= target for r in ft_records)
    return {
        "mode": mode,
        "seed": cfg.seed,
        "timing": timing,
        "coarse_epochs": report.coarse_epochs,
        "dense_pre_epochs": report.dense_pre_epochs,
        "finetune_epochs": report.finetune_epochs,
        "original_resolution_epochs": report.original_resolution_epochs,
        "total_seconds": report.total_seconds,
        "wall_seconds": report.wall_seconds,
        "val_loss": report.final_val_loss,
        "best_val_loss": report.best_val_loss,
        "target_loss": target,
        "reached_target": reached,
        "sections": sections,
    }


def summary_line(summary: dict) -> str:
    return (f"{summary['mode']}: coarse_epochs={summary['coarse_epochs']} "
            f"dense_pre_epochs={summary['dense_pre_epochs']} finetune_epochs={summary['finetune_epochs']} "
            f"total_seconds={summary['total_seconds']:.3f} val_loss={summary['val_loss']:.6g} "
            f"best_val_loss={summary['best_val_loss']:.6g}")
