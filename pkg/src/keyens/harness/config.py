"""Experiment configuration: a versioned YAML document mapped onto dataclasses.

Schema (version 1)::

    version: 1
    seed: <u64>                      # master seed; every other stream derives from it
    dataset:
      kind: synthetic | cifar10
      num_classes, height, width, channels, train_per_class, test_per_class,
      separation, noise, support     # synthetic only
      train_files, test_files        # cifar10 only: lists of binary batch paths
    model:    {hidden, epochs, batch_size, learning_rate, momentum}
    ensemble: {n, s, block_size, key_seeds}
    attack:   {names, epsilon, step_size, iterations, restarts, random_start,
               query_budget, p_init, keys_known, gradient_mode}
    eval:     {num_eval}
    output:   {dir, format, trace}

Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from ..attacks import ATTACK_NAMES, AttackConfig
from ..errors import ConfigError
from . import data as data_mod
from ..model import TrainConfig

CONFIG_VERSION = 1


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    num_classes: int = 10
    height: int = 16
    width: int = 16
    channels: int = 3
    train_per_class: int = 200
    test_per_class: int = 200
    separation: float = data_mod.SEPARATION
    noise: float = data_mod.NOISE
    support: Optional[int] = None
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)


@dataclass
class ModelSpec:
    hidden: list = field(default_factory=lambda: [128])
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.003
    momentum: float = 0.9


@dataclass
class EnsembleSpec:
    n: int = 4
    s: int = 3
    block_size: int = 4
    key_seeds: list = field(default_factory=lambda: [1001, 1002, 1003, 1004])


@dataclass
class AttackSpec:
    names: list = field(default_factory=lambda: ["pgd", "pgd-t", "square"])
    epsilon: float = 8 / 255
    step_size: Optional[float] = None
    iterations: int = 40
    restarts: int = 1
    random_start: bool = True
    query_budget: int = 1000
    p_init: float = 0.8
    keys_known: bool = False
    gradient_mode: str = "stochastic"


@dataclass
class EvalSpec:
    num_eval: int = 500


@dataclass
class OutputSpec:
    dir: str = "runs/default"
    format: str = "table"
    trace: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 20230101
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    version: int = CONFIG_VERSION

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def train_config(self, rng_seed: int) -> TrainConfig:
        m = self.model
        return TrainConfig(m.epochs, m.batch_size, m.learning_rate, m.momentum, rng_seed, tuple(m.hidden))

    def attack_config(self, trace: Optional[bool] = None) -> AttackConfig:
        a = self.attack
        return AttackConfig(a.epsilon, a.step_size, a.iterations, a.restarts, a.random_start,
                            a.query_budget, a.p_init, self.seed,
                            self.output.trace if trace is None else trace)


_SECTIONS = {"dataset": DatasetSpec, "model": ModelSpec, "ensemble": EnsembleSpec,
             "attack": AttackSpec, "eval": EvalSpec, "output": OutputSpec}


def config_digest(d: dict) -> str:
    """sha256 of the canonical JSON form, without the ``output`` section.

    Where results are written does not change them, so runs that differ only
    in output settings share a digest (and produce identical reports).
    """
    d = {k: v for k, v in d.items() if k != "output"}
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    version = raw.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    kwargs = {}
    for name, value in raw.items():
        if name == "seed":
            kwargs["seed"] = value
        elif name in _SECTIONS:
            cls = _SECTIONS[name]
            known = {f.name for f in fields(cls)}
            value = value or {}
            if not isinstance(value, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            unknown = set(value) - known
            if unknown:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
            kwargs[name] = cls(**value)
        else:
            raise ConfigError(f"unknown top-level key {name!r}")
    return ExperimentConfig(**kwargs)


def validate(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(isinstance(cfg.seed, int) and 0 <= cfg.seed < 1 << 64, "seed must be an unsigned 64-bit integer")
    d = cfg.dataset
    need(d.kind in ("synthetic", "cifar10"), f"dataset.kind must be synthetic or cifar10, not {d.kind!r}")
    if d.kind == "cifar10":
        need(d.train_files and d.test_files, "cifar10 needs train_files and test_files")
        need((d.height, d.width, d.channels, d.num_classes) == (32, 32, 3, 10),
             "cifar10 implies height=width=32, channels=3, num_classes=10")
    need(min(d.height, d.width, d.channels) >= 1 and d.num_classes >= 2, "invalid dataset dimensions")
    need(d.train_per_class >= 1 and d.test_per_class >= 0, "invalid per-class counts")
    e = cfg.ensemble
    need(e.n >= 4 and 3 <= e.s <= e.n, f"ensemble needs n >= 4 and 3 <= s <= n, got n={e.n}, s={e.s}")
    need(len(e.key_seeds) == e.n, f"ensemble.key_seeds must list {e.n} seeds")
    need(len(set(e.key_seeds)) == e.n, "ensemble.key_seeds must be distinct")
    need(all(isinstance(s, int) and 0 <= s < 1 << 64 for s in e.key_seeds), "key seeds must be u64")
    need(e.block_size >= 1 and d.height % e.block_size == 0 and d.width % e.block_size == 0,
         "image height and width must be multiples of ensemble.block_size")
    a = cfg.attack
    need(a.names and all(n in ATTACK_NAMES for n in a.names), f"attack.names must be drawn from {ATTACK_NAMES}")
    need(a.gradient_mode in ("stochastic", "full"), "attack.gradient_mode must be stochastic or full")
    need(cfg.eval.num_eval >= 1, "eval.num_eval must be >= 1")
    need(cfg.output.format in ("table", "csv", "jsonl"), "output.format must be table, csv or jsonl")
    try:
        cfg.attack_config()
        cfg.train_config(0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    try:
        return from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
