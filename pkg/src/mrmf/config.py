"""Experiment configuration files.

A config is a TOML document (bundled ones use the ``.cfg`` suffix)::

    seed = 1
    timing = "wall"            # or "modeled"
    coarse_path = "cpu"        # or "gpu" (pool inside the model)
    reinit_first_fc = false

    [task]                     # synthetic task, or: dataset = "file.mrd" + split
    extents = [200]
    channels = 3
    label_length = 19
    ...

    [model]
    layers = [{kind = "conv", kernel = 5, stride = 2, out_channels = 8}, ...]

    [optimizer]                # defaults for every phase
    kind = "adam"
    lr = 1e-3

    [finetune]                 # stop condition + per-phase overrides
    epsilon = 1e-4
    patience = 5
    max_epochs = 60
    target_loss = 0.01
    batch_size = 32

    [[stage]]
    coarse_factors = [4]
    dense_factors = [2]
    coarse = {epsilon = 2e-3, patience = 3, max_epochs = 20}
    dense = {epsilon = 1e-2, patience = 2, max_epochs = 4}

    [parallel]
    workers = 1
    concurrent = false
    total_workers = 2
    t_dense = 2.0
    t_coarse = 1.0
    granularity = 1

Unknown keys anywhere are rejected. Phase seeds are derived from the
top-level seed unless a phase sets its own.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data.dataset import Dataset
from .data.mrd import read_dataset
from .data.synthetic import SyntheticTaskSpec, generate_synthetic
from .errors import ConfigError, MRMFError
from .nn.model import Model, build_model
from .training.pipeline import ConcurrencySettings, PhaseSettings, PipelineOptions, StagePlan
from .training.stop import StopCondition
from .training.trainer import OptimizerConfig

_LAYER_KEYS = {
    "conv": {"kernel", "stride", "padding", "out_channels", "in_channels", "bias"},
    "avgpool": {"kernel", "stride"},
    "batchnorm": {"momentum", "eps", "channels"},
    "relu": set(),
    "tanh": set(),
    "flatten": set(),
    "fc": {"out_features", "in_features", "bias"},
}
_PHASE_KEYS = {"epsilon", "patience", "max_epochs", "target_loss", "batch_size", "lr", "optimizer",
               "momentum", "workers", "seed"}


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    seed: int
    task: SyntheticTaskSpec | None
    dataset_path: str | None
    split: tuple
    layers: list
    optimizer: OptimizerConfig
    finetune: PhaseSettings
    stages: list
    options: PipelineOptions
    output_dir: str | None = None
    source: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def model_seed(self) -> int:
        return derive_seed(self.seed, 0)

    def load_data(self) -> Dataset:
        if self.dataset_path:
            return read_dataset(self.dataset_path)
        return generate_synthetic(self.task)

    def splits(self):
        """``(train, val, test)`` datasets; val/test may be None for zero fractions."""
        return self.load_data().split(self.split)

    def sample_shape(self) -> tuple:
        if self.task is not None:
            return self.task.sample_shape
        return self.load_data().sample_shape

    def build_reference(self, sample_shape=None) -> Model:
        return build_model(self.layers, sample_shape or self.sample_shape(), seed=self.model_seed)


class _Table:
    """Dict wrapper that tracks consumed keys so leftovers can be rejected."""

    def __init__(self, data, path):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or 'config'}: expected a table")
        self.data = dict(data)
        self.path = path

    def _key(self, k):
        return f"{self.path}.{k}" if self.path else k

    def get(self, k, default=None, types=None):
        if k not in self.data:
            return default
        v = self.data.pop(k)
        if types is not None and (not isinstance(v, types) or (isinstance(v, bool) and bool not in _as_tuple(types))):
            raise ConfigError(f"{self._key(k)}: expected {_type_names(types)}, got {type(v).__name__}")
        return v

    def require(self, k, types=None):
        if k not in self.data:
            raise ConfigError(f"{self._key(k)}: missing required key")
        return self.get(k, types=types)

    def table(self, k):
        return _Table(self.get(k, {}), self._key(k))

    def done(self):
        if self.data:
            raise ConfigError(f"unknown key(s) {', '.join(self._key(k) for k in sorted(self.data))}")


def _as_tuple(t):
    return t if isinstance(t, tuple) else (t,)


def _type_names(types):
    return " or ".join(t.__name__ for t in _as_tuple(types))


_NUM = (int, float)


def _int_list(v, key):
    if isinstance(v, int) and not isinstance(v, bool):
        return (v,)
    if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        raise ConfigError(f"{key}: expected an integer or list of integers")
    return tuple(v)


def _parse_layers(items, path):
    if not isinstance(items, list) or not items:
        raise ConfigError(f"{path}: expected a non-empty list of layer tables")
    layers = []
    for i, item in enumerate(items):
        key = f"{path}[{i}]"
        if not isinstance(item, dict) or "kind" not in item:
            raise ConfigError(f"{key}: each layer needs a 'kind'")
        kind = item["kind"]
        if kind not in _LAYER_KEYS:
            raise ConfigError(f"{key}.kind: unknown layer kind {kind!r}")
        unknown = set(item) - _LAYER_KEYS[kind] - {"kind"}
        if unknown:
            raise ConfigError(f"unknown key(s) {', '.join(f'{key}.{k}' for k in sorted(unknown))}")
        spec = dict(item)
        for k in ("kernel", "stride", "padding"):
            if k in spec and (not isinstance(spec[k], int) or isinstance(spec[k], bool)):
                spec[k] = _int_list(spec[k], f"{key}.{k}")
        layers.append(spec)
    return layers


def _parse_phase(tbl: _Table, base: OptimizerConfig, seed: int, defaults: dict) -> PhaseSettings:
    try:
        stop = StopCondition(
            float(tbl.get("epsilon", defaults.get("epsilon", 1e-3), _NUM)),
            tbl.get("patience", defaults.get("patience", 3), int),
            tbl.get("max_epochs", defaults.get("max_epochs", 20), int),
            tbl.get("target_loss", None, _NUM),
        )
        opt = OptimizerConfig(
            kind=tbl.get("optimizer", base.kind, str),
            lr=float(tbl.get("lr", base.lr, _NUM)),
            momentum=float(tbl.get("momentum", base.momentum, _NUM)),
            beta1=base.beta1, beta2=base.beta2, eps=base.eps,
        )
        opt.make()
        phase = PhaseSettings(
            stop,
            batch_size=tbl.get("batch_size", defaults.get("batch_size", 32), int),
            optimizer=opt,
            seed=tbl.get("seed", seed, int),
            workers=tbl.get("workers", defaults.get("workers", 1), int),
        )
    except ValueError as exc:
        raise ConfigError(f"{tbl.path}: {exc}") from None
    tbl.done()
    return phase


def parse_config(text: str, source: str | None = None, seed_override: int | None = None) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source or 'config'}: parse error: {exc}") from None
    base_dir = os.path.dirname(os.path.abspath(source)) if source else os.getcwd()
    root = _Table(raw, "")
    seed = root.get("seed", 0, int)
    if seed_override is not None:
        seed = seed_override
    timing = root.get("timing", "wall", str)
    coarse_path = root.get("coarse_path", "cpu", str)
    reinit = root.get("reinit_first_fc", False, bool)
    output_dir = root.get("output_dir", None, str)
    if timing not in ("wall", "modeled"):
        raise ConfigError("timing: expected 'wall' or 'modeled'")
    if coarse_path not in ("cpu", "gpu"):
        raise ConfigError("coarse_path: expected 'cpu' or 'gpu'")

    task_tbl = root.table("task")
    split = task_tbl.get("split", [0.8, 0.1, 0.1], list)
    dataset_path = task_tbl.get("dataset", None, str)
    task = None
    if dataset_path is not None:
        dataset_path = os.path.join(base_dir, dataset_path)
        if not os.path.isfile(dataset_path):
            raise ConfigError(f"task.dataset: file not found: {dataset_path}")
    else:
        try:
            task = SyntheticTaskSpec(
                extents=_int_list(task_tbl.require("extents"), "task.extents"),
                channels=task_tbl.require("channels", int),
                label_length=task_tbl.require("label_length", int),
                components=task_tbl.get("components", 2, int),
                max_frequency=task_tbl.get("max_frequency", 2, int),
                amplitude=tuple(float(a) for a in task_tbl.get("amplitude", [-1.0, 1.0], list)),
                seed=task_tbl.get("seed", seed, int),
                samples=task_tbl.require("samples", int),
                split=tuple(float(s) for s in split),
            )
            task.validate()
        except MRMFError as exc:
            raise ConfigError(f"task: {exc}") from None
    task_tbl.done()
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0 or split[0] <= 0:
        raise ConfigError("task.split: expected three non-negative fractions summing to 1 with a non-empty train part")

    model_tbl = root.table("model")
    layers = _parse_layers(model_tbl.require("layers", list), "model.layers")
    model_tbl.done()

    opt_tbl = root.table("optimizer")
    try:
        optimizer = OptimizerConfig(
            kind=opt_tbl.get("kind", "adam", str),
            lr=float(opt_tbl.get("lr", 1e-3, _NUM)),
            momentum=float(opt_tbl.get("momentum", 0.0, _NUM)),
            beta1=float(opt_tbl.get("beta1", 0.9, _NUM)),
            beta2=float(opt_tbl.get("beta2", 0.999, _NUM)),
            eps=float(opt_tbl.get("eps", 1e-8, _NUM)),
        )
        optimizer.make()
    except ValueError as exc:
        raise ConfigError(f"optimizer: {exc}") from None
    opt_tbl.done()

    par_tbl = root.table("parallel")
    workers = par_tbl.get("workers", 1, int)
    try:
        conc = ConcurrencySettings(
            enabled=par_tbl.get("concurrent", False, bool),
            total_workers=par_tbl.get("total_workers", 2, int),
            t_dense=par_tbl.get("t_dense", None, _NUM),
            t_coarse=par_tbl.get("t_coarse", None, _NUM),
            granularity=par_tbl.get("granularity", 1, int),
        )
    except ValueError as exc:
        raise ConfigError(f"parallel: {exc}") from None
    par_tbl.done()
    if workers < 1:
        raise ConfigError("parallel.workers: must be >= 1")

    defaults = {"workers": workers}
    finetune = _parse_phase(root.table("finetune"), optimizer, derive_seed(seed, 2), defaults)

    stages = []
    stage_items = root.get("stage", [], list)
    for s, item in enumerate(stage_items):
        st = _Table(item, f"stage[{s}]")
        cf = _int_list(st.require("coarse_factors"), f"stage[{s}].coarse_factors")
        df = _int_list(st.require("dense_factors"), f"stage[{s}].dense_factors")
        coarse = _parse_phase(st.table("coarse"), optimizer, derive_seed(seed, 1, s, 0), defaults)
        dense = _parse_phase(st.table("dense"), optimizer, derive_seed(seed, 1, s, 1), defaults)
        st.done()
        try:
            stages.append(StagePlan(cf, df, coarse, dense))
        except ValueError as exc:
            raise ConfigError(f"stage[{s}]: {exc}") from None
    root.done()

    try:
        options = PipelineOptions(timing=timing, coarse_path=coarse_path, reinit_first_fc=reinit, concurrency=conc)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig(seed, task, dataset_path, tuple(float(s) for s in split), layers, optimizer, finetune,
                           stages, options, output_dir, source, raw)
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg: ExperimentConfig) -> None:
    from .training.pipeline import validate_schedule

    shape = cfg.sample_shape()
    try:
        ref = build_model(cfg.layers, shape)
    except MRMFError as exc:
        raise ConfigError(f"model.layers: {exc}") from None
    if cfg.task is not None and ref.output_size != cfg.task.label_length:
        raise ConfigError(f"model.layers: output size {ref.output_size} != task.label_length {cfg.task.label_length}")
    try:
        validate_schedule(cfg.stages, shape)
    except (ValueError, MRMFError) as exc:
        raise ConfigError(f"stage: {exc}") from None


def bundled_config_path(name: str) -> str | None:
    ref = resources.files("mrmf") / "configs" / f"{name}.cfg"
    return str(ref) if ref.is_file() else None


def resolve_config_path(name_or_path: str) -> str:
    if os.path.isfile(name_or_path):
        return name_or_path
    bundled = bundled_config_path(name_or_path)
    if bundled is None:
        raise ConfigError(f"config not found: {name_or_path!r} (neither a file nor a bundled config name)")
    return bundled


def load_config(name_or_path: str, seed_override: int | None = None) -> ExperimentConfig:
    path = resolve_config_path(name_or_path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, path, seed_override)
