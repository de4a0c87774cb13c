"""Experiment configuration: a sectioned key/value file read with configparser.

Every key has a default; unknown sections or keys are rejected so a typo
cannot silently fall back to a default. The shipped federation defaults are
the Table-2 values (20 clients, 5 per round, 100 rounds, 5 local epochs,
batch 32, Adam at 0.001).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .data import Scheme
from .fed import DpConfig, FedConfig

METHODS = ("attention", "fedavg", "local_only", "centralized", "attention_dp")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"  # synthetic | corpus
    corpus_path: str = ""
    num_subjects: int = 100
    impressions_per_subject: int = 8
    image_size: int = 128
    noise_level: float = 0.1
    holdout_fraction: float = 0.25

    def __post_init__(self):
        if self.source not in ("synthetic", "corpus"):
            raise ValueError("source must be 'synthetic' or 'corpus'")
        if self.source == "corpus" and not self.corpus_path:
            raise ValueError("corpus_path is required when source = corpus")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "dirichlet"
    alpha: float = 0.3
    shards: int = 2

    def __post_init__(self):
        self.to_scheme()

    def to_scheme(self) -> Scheme:
        return Scheme(self.scheme, self.alpha, self.shards)


@dataclass(frozen=True)
class ModelConfig:
    head: str = "contrastive"
    margin: float = 1.0
    dropout: float = 0.5
    num_classes: int = 10


@dataclass(frozen=True)
class FedSection:
    """FedConfig fields that belong in the file (seed and DP live elsewhere)."""

    num_clients: int = 20
    clients_per_round: int = 5
    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.001
    aggregator: str = "attention"
    scorer: str = "update_similarity"
    temperature: float = 1.0
    pairs_per_impression: float = 2.0
    match_fraction: float = 0.5
    holdin_fraction: float = 0.2
    threshold_policy: str = "eer_threshold"

    def __post_init__(self):
        self.to_fed_config()

    def to_fed_config(self, seed: int = 0, dp: DpConfig | None = None) -> FedConfig:
        return FedConfig(**dataclasses.asdict(self), dp=dp, seed=seed)


@dataclass(frozen=True)
class ExperimentSection:
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "results"

    def __post_init__(self):
        if not self.methods:
            raise ValueError("methods must not be empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must not repeat")
        if not self.seeds:
            raise ValueError("seeds must not be empty")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fed: FedSection = field(default_factory=FedSection)
    dp: DpConfig = field(default_factory=DpConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def fed_config(self, method: str, seed: int) -> FedConfig:
        base = self.fed.to_fed_config(seed=seed)
        if method == "fedavg":
            return dataclasses.replace(base, aggregator="fedavg")
        if method in ("attention", "attention_dp"):
            dp = self.dp if method == "attention_dp" else None
            return dataclasses.replace(base, aggregator="attention", dp=dp)
        return base


SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _section_types():
    hints = get_type_hints(ExperimentConfig)
    return {name: hints[name] for name in SECTIONS}


def _convert(section: str, key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError
            return lowered in ("true", "yes", "1")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typ == tuple[str, ...]:
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if typ == tuple[int, ...]:
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        pass
    else:
        raise ConfigError(f"[{section}] {key}: unsupported type {typ}")
    expected = {int: "an integer", float: "a number", bool: "true/false"}.get(
        typ, "a comma-separated list of integers" if typ == tuple[int, ...] else str(typ)
    )
    raise ConfigError(f"[{section}] {key} = {raw!r}: expected {expected}")


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keep keys case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    types = _section_types()
    sections = {}
    for name in parser.sections():
        if name not in types:
            raise ConfigError(f"{source}: unknown section [{name}]; expected one of {list(types)}")
        cls = types[name]
        hints = get_type_hints(cls)
        values = {}
        for key, raw in parser.items(name):
            if key not in hints:
                raise ConfigError(
                    f"{source}: unknown key {key!r} in [{name}]; allowed: {', '.join(hints)}"
                )
            values[key] = _convert(name, key, raw, hints[key])
        try:
            sections[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from exc
    cfg = ExperimentConfig(**sections)
    # cross-section constraint: the partition must match the client count
    if cfg.dataset.source == "synthetic" and cfg.fed.num_clients * 2 > cfg.dataset.num_subjects:
        raise ConfigError(
            f"{source}: [fed] num_clients = {cfg.fed.num_clients} needs at least "
            f"{2 * cfg.fed.num_clients} subjects, [dataset] num_subjects = {cfg.dataset.num_subjects}"
        )
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return parse_config_text(text, str(path))


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)
