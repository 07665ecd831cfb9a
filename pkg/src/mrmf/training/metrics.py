"""Per-epoch metrics rows and their CSV form."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass

HEADER = ("stage", "phase", "epoch", "train_loss", "val_loss", "epoch_seconds", "samples_per_sec")
PHASES = ("coarse", "dense", "finetune")


@dataclass(frozen=True)
class MetricsRecord:
    stage: int
    phase: str
    epoch: int
    train_loss: float
    val_loss: float
    epoch_seconds: float
    samples_per_sec: float

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if not (math.isfinite(self.train_loss) and math.isfinite(self.val_loss)):
            raise ValueError("metrics losses must be finite")
        if not self.epoch_seconds > 0:
            raise ValueError("epoch_seconds must be > 0")


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def records_to_csv(records) -> str:
    out = io.StringIO()
    out.write(",".join(HEADER) + "\n")
    for r in records:
        out.write(",".join(_fmt(v) for v in astuple(r)) + "\n")
    return out.getvalue()


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv(records))


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        rows = []
        for row in reader:
            if not row:
                continue
            rows.append(MetricsRecord(int(row[0]), row[1], int(row[2]), float(row[3]), float(row[4]),
                                      float(row[5]), float(row[6])))
    return rows
