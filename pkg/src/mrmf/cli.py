"""Command-line entry point: ``mrmf <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 config, 4 data/shape, 5 training abort,
6 fusion mismatch, 7 file I/O, 8-11 malformed binary files.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data.mrd import read_dataset, write_dataset
from .data.resolution import downsample_dataset
from .data.synthetic import generate_synthetic
from .errors import ConfigError, DataError, MRMFError, TrainingAborted
from .experiment import MODES, run_experiment, summary_line
from .fusion import fuse, provenance
from .report import write_report


def _factors(text: str) -> tuple:
    try:
        factors = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not factors or min(factors) < 1:
        raise argparse.ArgumentTypeError("factors must be positive integers")
    return factors


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    if cfg.task is None:
        raise ConfigError("gen-data needs a synthetic [task] section, not a dataset path")
    data = generate_synthetic(cfg.task)
    write_dataset(data, args.out)
    print(f"wrote {args.out}: N={len(data)} sample_shape={data.sample_shape} label_length={data.label_length}")
    return 0


def cmd_downsample(args) -> int:
    data = read_dataset(args.input)
    if len(args.factors) != data.spatial_dims:
        raise DataError(f"--factors has {len(args.factors)} entries but the data has {data.spatial_dims} spatial axes")
    out = downsample_dataset(data, args.factors)
    write_dataset(out, args.out)
    print(f"wrote {args.out}: {data.sample_shape} -> {out.sample_shape} (N={len(out)})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.worker_granularity is not None:
        try:
            conc = replace(cfg.options.concurrency, granularity=args.worker_granularity)
        except ValueError as exc:
            raise ConfigError(f"--worker-granularity: {exc}") from None
        cfg = replace(cfg, options=replace(cfg.options, concurrency=conc))
    out_dir = args.out or cfg.output_dir
    if not out_dir:
        raise ConfigError("no output directory: pass --out or set output_dir in the config")
    try:
        summary = run_experiment(cfg, args.mode, out_dir, args.timing)
    except TrainingAborted as exc:
        path = getattr(exc, "diagnostic_path", None)
        print(f"training aborted: {exc}", file=sys.stderr)
        if path:
            print(f"diagnostic record: {path}", file=sys.stderr)
        return exc.exit_code
    print(summary_line(summary))
    for sec in summary["sections"]:
        if sec["section"] == "finetune":
            print(f"  finetune: epochs={sec['epochs']} val_loss={sec['val_loss']:.6g}")
        else:
            print(f"  {sec['section']}: {sec['coarse_factors']} -> {sec['dense_factors']} "
                  f"coarse_epochs={sec['coarse_epochs']} dense_epochs={sec['dense_epochs']}")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_fuse(args) -> int:
    coarse = load_checkpoint(args.coarse)
    dense = load_checkpoint(args.dense)
    fused = fuse(coarse, dense, reinit_first_fc=args.reinit_first_fc, seed=args.seed)
    save_checkpoint(fused, args.out)
    for i, kind, source in provenance(fused, coarse, dense):
        print(f"layer {i} {kind}: {source}")
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    csv_path, svg_path, totals = write_report(args.metrics_dir, args.out)
    for t in totals:
        print(f"stage {t.stage} {t.phase}: epochs={t.epochs} seconds={t.total_seconds:.6g}")
    print(f"total_seconds={sum(t.total_seconds for t in totals):.6g}")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrmf", description="Multi-resolution model fusion experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset from a config")
    g.add_argument("config", help="config file path or bundled config name (e.g. neuron_mini)")
    g.add_argument("--out", required=True, help="output .mrd dataset path")
    g.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("downsample", help="block-average a dataset to a lower resolution")
    d.add_argument("input", help="input .mrd dataset")
    d.add_argument("--factors", type=_factors, required=True,
                   help="comma-separated integer factor per spatial axis, e.g. 2,2,2")
    d.add_argument("--out", required=True, help="output .mrd dataset path")
    d.set_defaults(func=cmd_downsample)

    t = sub.add_parser("train", help="run baseline or multi-resolution training from a config")
    t.add_argument("config", help="config file path or bundled config name")
    t.add_argument("--mode", choices=MODES, default="mrmf",
                   help="baseline: train the model on original data; mrmf: fusion stages then finetune")
    t.add_argument("--out", default=None, help="output directory (defaults to the config's output_dir)")
    t.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    t.add_argument("--timing", choices=("wall", "modeled"), default=None,
                   help="epoch time source: measured wall clock or a deterministic cost model")
    t.add_argument("--worker-granularity", type=int, default=None, metavar="G",
                   help="in concurrent mode, round each worker group to a multiple of G (overrides the config)")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fuse a coarse and a dense checkpoint")
    f.add_argument("coarse", help="coarse model checkpoint (.mrc); supplies the bottom layer group")
    f.add_argument("dense", help="dense model checkpoint (.mrc); supplies the top layer group")
    f.add_argument("--out", required=True, help="output checkpoint path")
    f.add_argument("--reinit-first-fc", action="store_true",
                   help="draw fresh weights for the first fully connected layer instead of copying them")
    f.add_argument("--seed", type=int, default=0, help="seed for --reinit-first-fc")
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("report", help="per-phase totals CSV and loss-curve SVG from a run's metrics")
    r.add_argument("metrics_dir", help="run output directory (or a metrics.csv path)")
    r.add_argument("--out", required=True, help="output prefix; writes PREFIX_phases.csv and PREFIX_loss.svg")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MRMFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
