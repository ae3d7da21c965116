"""Experiment configuration: dataclasses plus a TOML reader/writer.

A config file has one table per concern::

    [topology]
    model = "erdos-renyi"     # or "edge-list"
    n_nodes = 8
    p = 0.3

    [data]
    source = "synthetic"      # or "idx"

    [partition]
    alpha = 0.5

    [model]
    arch = "mlp"
    hidden = [32]

    [training]
    epochs = 2
    batch_size = 32
    lr = 0.2
    momentum = 0.5

    [aggregation]
    strategy = "dechw"
    theta = "inf"

    [run]
    rounds = 20
    seed = 0

    [output]
    dir = "runs/example"

Every key is optional; unknown keys are rejected.  Seeds left unset in
``topology``, ``data`` and ``partition`` follow ``run.seed``.
"""
from __future__ import annotations

import copy
import dataclasses
import difflib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import tomli
import tomli_w

from .errors import ConfigError


@dataclass
class TopologyConfig:
    model: str = "erdos-renyi"
    n_nodes: int = 8
    p: float = 0.3
    seed: Optional[int] = None
    edge_list: Optional[str] = None


@dataclass
class DataConfig:
    source: str = "synthetic"
    seed: Optional[int] = None
    # synthetic generator
    num_classes: int = 10
    samples_per_class: int = 200
    test_per_class: int = 100
    input_dim: int = 64
    class_separation: float = 6.0
    # IDX files
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None


@dataclass
class PartitionConfig:
    alpha: float = 0.5
    seed: Optional[int] = None
    min_samples_per_node: int = 1


@dataclass
class ModelConfig:
    arch: str = "mlp"
    hidden: List[int] = field(default_factory=lambda: [32])
    activation: str = "relu"


@dataclass
class TrainingConfig:
    epochs: int = 2
    batch_size: int = 32
    lr: float = 0.2
    momentum: float = 0.5


@dataclass
class AggregationConfig:
    strategy: str = "dechw"
    beta: float = 1.0
    theta: Optional[int] = None  # None: exchange hessians in every round
    no_accumulation: bool = False
    sample_budget: int = 512


@dataclass
class RunConfig:
    rounds: int = 20
    seed: int = 0
    eval_every: int = 1
    homogeneous_init: bool = False
    workers: int = 1


@dataclass
class OutputConfig:
    dir: str = "runs"
    metrics: str = "metrics.csv"
    partition_stats: str = "partition_stats.csv"
    manifest: str = "manifest.json"


@dataclass
class ExperimentConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    run: RunConfig = field(default_factory=RunConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def topology_seed(self) -> int:
        return self.run.seed if self.topology.seed is None else self.topology.seed

    @property
    def data_seed(self) -> int:
        return self.run.seed if self.data.seed is None else self.data.seed

    @property
    def partition_seed(self) -> int:
        return self.run.seed if self.partition.seed is None else self.partition.seed

    @property
    def theta(self) -> float:
        t = self.aggregation.theta
        return math.inf if t is None else t

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields of some sections changed: ``cfg.replace(run={"seed": 3})``."""
        new = copy.deepcopy(self)
        for name, values in sections.items():
            setattr(new, name, dataclasses.replace(getattr(self, name), **values))
        validate(new)
        return new


_SECTION_TYPES = {
    "topology": TopologyConfig, "data": DataConfig, "partition": PartitionConfig, "model": ModelConfig,
    "training": TrainingConfig, "aggregation": AggregationConfig, "run": RunConfig, "output": OutputConfig,
}


def _suggest(name: str, options) -> str:
    close = difflib.get_close_matches(name, list(options), n=1)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _coerce(key: str, value, annotation: str):
    """Type-check one value against its field's annotation string."""
    if annotation == "Optional[int]" and key.endswith("theta"):
        if value is None or value == "inf" or (isinstance(value, float) and math.isinf(value) and value > 0):
            return None
        annotation = "int"
    base = annotation.replace("Optional[", "").rstrip("]")
    if value is None:
        if annotation.startswith("Optional"):
            return None
        raise ConfigError(f"{key}: value required")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if base == "List[int":
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported field type {annotation}")


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    cfg = ExperimentConfig()
    for section, values in raw.items():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}]{_suggest(section, _SECTION_TYPES)}")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        for key, value in values.items():
            dotted = f"{section}.{key}"
            if key not in known:
                raise ConfigError(f"unknown key {dotted!r}{_suggest(key, known)}")
            f = known[key]
            setattr(target, key, _coerce(dotted, value, str(f.type)))
    validate(cfg)
    return cfg


def _positive(value, key):
    if not value > 0:
        raise ConfigError(f"{key} must be > 0, got {value}")


def validate(cfg: ExperimentConfig) -> None:
    """Check cross-field constraints; raises ConfigError naming the key."""
    from .aggregation import STRATEGIES
    from .nncore import ARCHITECTURES

    t = cfg.topology
    if t.model not in ("erdos-renyi", "edge-list"):
        raise ConfigError(f"topology.model must be 'erdos-renyi' or 'edge-list', got {t.model!r}")
    if t.n_nodes < 1:
        raise ConfigError("topology.n_nodes must be >= 1")
    if not 0.0 <= t.p <= 1.0:
        raise ConfigError(f"topology.p must lie in [0, 1], got {t.p}")
    if t.model == "edge-list" and not t.edge_list:
        raise ConfigError("topology.edge_list is required when topology.model = 'edge-list'")

    d = cfg.data
    if d.source not in ("synthetic", "idx"):
        raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {d.source!r}")
    if d.source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(d, key):
                raise ConfigError(f"data.{key} is required when data.source = 'idx'")
    for key in ("num_classes", "samples_per_class", "input_dim", "test_per_class"):
        if getattr(d, key) < 1:
            raise ConfigError(f"data.{key} must be >= 1")
    for key in ("train_subset", "test_subset"):
        if getattr(d, key) is not None and getattr(d, key) < 1:
            raise ConfigError(f"data.{key} must be >= 1")

    _positive(cfg.partition.alpha, "partition.alpha")
    if cfg.partition.min_samples_per_node < 0:
        raise ConfigError("partition.min_samples_per_node must be >= 0")

    m = cfg.model
    if m.arch not in ARCHITECTURES:
        raise ConfigError(f"model.arch must be one of {ARCHITECTURES}, got {m.arch!r}")
    if any(h < 1 for h in m.hidden):
        raise ConfigError("model.hidden entries must be >= 1")
    if m.activation not in ("relu", "tanh"):
        raise ConfigError(f"model.activation must be 'relu' or 'tanh', got {m.activation!r}")

    tr = cfg.training
    if tr.epochs < 0:
        raise ConfigError("training.epochs must be >= 0")
    if tr.batch_size < 1:
        raise ConfigError("training.batch_size must be >= 1")
    _positive(tr.lr, "training.lr")
    if not 0.0 <= tr.momentum < 1.0:
        raise ConfigError(f"training.momentum must lie in [0, 1), got {tr.momentum}")

    a = cfg.aggregation
    if a.strategy not in STRATEGIES:
        raise ConfigError(f"aggregation.strategy must be one of {STRATEGIES}, got {a.strategy!r}"
                          f"{_suggest(a.strategy, STRATEGIES)}")
    if not 0.0 <= a.beta <= 1.0:
        raise ConfigError(f"aggregation.beta must lie in [0, 1], got {a.beta}")
    if a.theta is not None and a.theta < 0:
        raise ConfigError("aggregation.theta must be >= 0")
    if a.sample_budget < 1:
        raise ConfigError("aggregation.sample_budget must be >= 1")

    r = cfg.run
    if r.rounds < 1:
        raise ConfigError("run.rounds must be >= 1")
    if r.eval_every < 1:
        raise ConfigError("run.eval_every must be >= 1")
    if r.workers < 1:
        raise ConfigError("run.workers must be >= 1")


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for section in _SECTION_TYPES:
        values = {}
        for key, value in dataclasses.asdict(getattr(cfg, section)).items():
            if section == "aggregation" and key == "theta" and value is None:
                value = "inf"
            if value is not None:
                values[key] = value
        out[section] = values
    return out


def emit(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def parse_text(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from exc
    return from_dict(raw)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        return parse_text(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def apply_override(cfg: ExperimentConfig, assignment: str) -> ExperimentConfig:
    """Apply ``section.key=value`` where value uses TOML syntax (bare words are strings)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    dotted, text = assignment.split("=", 1)
    dotted = dotted.strip()
    if dotted.count(".") != 1:
        raise ConfigError(f"override key {dotted!r} must look like section.key")
    section, key = dotted.split(".")
    try:
        value = tomli.loads(f"v = {text.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = text.strip()
    raw = to_dict(cfg)
    raw.setdefault(section, {})[key] = value
    return from_dict(raw)
