"""Aggregate metrics records into per-phase totals and a loss-curve SVG."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

from .errors import DataError, FileIOError
from .training.metrics import MetricsRecord, read_metrics_csv

PHASE_HEADER = ("stage", "phase", "epochs", "total_seconds", "final_train_loss", "final_val_loss", "best_val_loss")
_COLORS = {"coarse": "#1f77b4", "dense": "#d62728", "finetune": "#2ca02c"}


@dataclass
class PhaseTotal:
    stage: int
    phase: str
    epochs: int
    total_seconds: float
    final_train_loss: float
    final_val_loss: float
    best_val_loss: float


def phase_groups(records) -> list[tuple[tuple[int, str], list[MetricsRecord]]]:
    """Records grouped by ``(stage, phase)`` in order of first appearance."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.stage, r.phase), []).append(r)
    return list(groups.items())


def phase_totals(records) -> list[PhaseTotal]:
    out = []
    for (stage, phase), recs in phase_groups(records):
        out.append(PhaseTotal(stage, phase, len(recs), sum(r.epoch_seconds for r in recs),
                              recs[-1].train_loss, recs[-1].val_loss, min(r.val_loss for r in recs)))
    return out


def totals_to_csv(totals) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PHASE_HEADER)
    for t in totals:
        w.writerow([t.stage, t.phase, t.epochs, repr(t.total_seconds), repr(t.final_train_loss),
                    repr(t.final_val_loss), repr(t.best_val_loss)])
    return buf.getvalue()


def loss_svg(records, width: int = 640, height: int = 400, title: str = "validation loss") -> str:
    """One polyline per (stage, phase), x = cumulative epoch, y = validation loss.

    Output depends only on the records, so identical inputs give identical bytes.
    """
    groups = phase_groups(records)
    margin_l, margin_r, margin_t, margin_b = 60, 150, 30, 40
    pw, ph = width - margin_l - margin_r, height - margin_t - margin_b
    losses = [r.val_loss for r in records]
    lo, hi = min(losses), max(losses)
    if hi == lo:
        hi = lo + 1.0
    n = len(records)

    def sx(i):
        return margin_l + (pw * i / (n - 1) if n > 1 else pw / 2)

    def sy(v):
        return margin_t + ph * (hi - v) / (hi - lo)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{margin_l}" y="20" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{margin_l}" y1="{margin_t + ph}" x2="{margin_l + pw}" y2="{margin_t + ph}" stroke="black"/>',
        f'<line x1="{margin_l}" y1="{margin_t}" x2="{margin_l}" y2="{margin_t + ph}" stroke="black"/>',
        f'<text x="{margin_l - 5}" y="{margin_t + 4}" font-family="sans-serif" font-size="10" '
        f'text-anchor="end">{hi:.4g}</text>',
        f'<text x="{margin_l - 5}" y="{margin_t + ph + 4}" font-family="sans-serif" font-size="10" '
        f'text-anchor="end">{lo:.4g}</text>',
        f'<text x="{margin_l + pw / 2:.2f}" y="{height - 10}" font-family="sans-serif" font-size="11" '
        f'text-anchor="middle">epoch (cumulative)</text>',
    ]
    i = 0
    for k, ((stage, phase), recs) in enumerate(groups):
        pts = []
        for r in recs:
            pts.append(f"{sx(i):.2f},{sy(r.val_loss):.2f}")
            i += 1
        color = _COLORS.get(phase, "#7f7f7f")
        label = f"stage {stage} {phase}"
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}">'
                     f"<title>{label}</title></polyline>")
        ly = margin_t + 14 * k + 6
        lx = margin_l + pw + 10
        lines.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 16}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        lines.append(f'<text x="{lx + 20}" y="{ly + 4}" font-family="sans-serif" font-size="10">{label}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def load_metrics_dir(metrics_dir: str) -> list[MetricsRecord]:
    path = os.path.join(metrics_dir, "metrics.csv") if os.path.isdir(metrics_dir) else metrics_dir
    if not os.path.exists(path):
        raise FileIOError(f"no metrics found at {path}")
    try:
        records = read_metrics_csv(path)
    except (ValueError, IndexError) as exc:
        raise DataError(f"unreadable metrics file {path}: {exc}") from None
    except OSError as exc:
        raise FileIOError(f"cannot read {path}: {exc}") from None
    if not records:
        raise DataError(f"metrics file {path} has no records")
    return records


def write_report(metrics_dir: str, out_prefix: str) -> tuple[str, str, list[PhaseTotal]]:
    """Write ``<prefix>_phases.csv`` and ``<prefix>_loss.svg``; returns their paths and the totals."""
    records = load_metrics_dir(metrics_dir)
    totals = phase_totals(records)
    csv_path, svg_path = f"{out_prefix}_phases.csv", f"{out_prefix}_loss.svg"
    parent = os.path.dirname(os.path.abspath(out_prefix))
    try:
        os.makedirs(parent, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(totals_to_csv(totals))
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(loss_svg(records))
    except OSError as exc:
        raise FileIOError(f"cannot write report: {exc}") from None
    return csv_path, svg_path, totals
