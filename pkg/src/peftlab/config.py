"""
Harness configuration: one JSON document with a section per component.

Every key has a default, so ``{}`` is a complete config. Unknown keys are
rejected with their dotted path. :func:`dumps` re-emits a parsed config in
canonical form, and parsing that text yields an equal config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

from . import peft
from .errors import ConfigError
from .peft import MethodConfig
from .tasks import TaskSpec, UtteranceCls, task_from_dict, task_to_dict
from .train import OptimConfig, PretrainConfig
from .transformer import EncoderConfig

DEFAULT_LRS = (5e-6, 5e-5, 5e-4, 5e-3)
DEFAULT_FRACTIONS = (1.0, 0.1, 0.01)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 512
    n_test: int = 256
    seq_len: int = 32
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            lo = 0 if f.name == "seed" else 1
            if not isinstance(value, int) or isinstance(value, bool) or value < lo:
                raise ConfigError(f"data.{f.name} must be an integer >= {lo}, got {value!r}")


@dataclass(frozen=True)
class SweepConfig:
    lrs: tuple = DEFAULT_LRS
    fractions: tuple = DEFAULT_FRACTIONS
    methods: tuple = field(default_factory=lambda: tuple(peft.all_methods()))

    def __post_init__(self):
        object.__setattr__(self, "lrs", tuple(float(x) for x in _nonempty_numbers("sweep.lrs", self.lrs)))
        object.__setattr__(self, "fractions",
                           tuple(float(x) for x in _nonempty_numbers("sweep.fractions", self.fractions)))
        if any(lr <= 0 for lr in self.lrs):
            raise ConfigError(f"sweep.lrs must be positive, got {list(self.lrs)}")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError(f"sweep.fractions must lie in (0, 1], got {list(self.fractions)}")
        if not self.methods:
            raise ConfigError("sweep.methods must be non-empty")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError(f"sweep.methods lists a method twice: {names}")


@dataclass(frozen=True)
class HarnessConfig:
    encoder: EncoderConfig = EncoderConfig()
    pretrain: PretrainConfig = PretrainConfig()
    method: MethodConfig = peft.Houlsby()
    task: TaskSpec = UtteranceCls()
    data: DataConfig = DataConfig()
    optim: OptimConfig = OptimConfig()
    seeds: tuple = (1,)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    log_every: int = 10
    out: str = "out"

    def __post_init__(self):
        seeds = self.seeds
        if not isinstance(seeds, (list, tuple)) or not seeds or not all(
                isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
            raise ConfigError(f"seeds must be a non-empty list of non-negative integers, got {seeds!r}")
        object.__setattr__(self, "seeds", tuple(seeds))
        if not isinstance(self.log_every, int) or self.log_every < 1:
            raise ConfigError(f"log_every must be a positive integer, got {self.log_every!r}")
        if self.data.seq_len > self.encoder.max_len:
            raise ConfigError(f"data.seq_len {self.data.seq_len} exceeds encoder.max_len {self.encoder.max_len}")


def _nonempty_numbers(key, values):
    if isinstance(values, (str, bytes)) or not hasattr(values, "__iter__"):
        raise ConfigError(f"{key} must be a list of numbers, got {values!r}")
    values = list(values)
    if not values or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise ConfigError(f"{key} must be a non-empty list of numbers, got {values!r}")
    return values


def _section(cls, raw, key: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{key} must be an object, got {type(raw).__name__}")
    allowed = {f.name for f in fields(cls)}
    for name in raw:
        if name not in allowed:
            raise ConfigError(f"unknown key {key}.{name}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _method(raw, key: str) -> MethodConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{key} must be an object, got {type(raw).__name__}")
    try:
        return peft.method_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def from_dict(raw: Mapping) -> HarnessConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a JSON object")
    allowed = {f.name for f in fields(HarnessConfig)}
    for name in raw:
        if name not in allowed:
            raise ConfigError(f"unknown key {name}")
    kw: dict = {}
    if "encoder" in raw:
        kw["encoder"] = _section(EncoderConfig, raw["encoder"], "encoder")
    if "pretrain" in raw:
        kw["pretrain"] = _section(PretrainConfig, raw["pretrain"], "pretrain")
    if "method" in raw:
        kw["method"] = _method(raw["method"], "method")
    if "task" in raw:
        if not isinstance(raw["task"], Mapping):
            raise ConfigError("task must be an object")
        try:
            kw["task"] = task_from_dict(raw["task"])
        except TypeError as exc:
            raise ConfigError(f"task: {exc}") from None
    if "data" in raw:
        kw["data"] = _section(DataConfig, raw["data"], "data")
    if "optim" in raw:
        kw["optim"] = _section(OptimConfig, raw["optim"], "optim")
    if "sweep" in raw:
        sweep = dict(raw["sweep"]) if isinstance(raw["sweep"], Mapping) else raw["sweep"]
        if isinstance(sweep, dict) and "methods" in sweep:
            methods = sweep["methods"]
            if not isinstance(methods, list):
                raise ConfigError("sweep.methods must be a list of method objects")
            sweep["methods"] = tuple(_method(m, f"sweep.methods[{i}]") for i, m in enumerate(methods))
        kw["sweep"] = _section(SweepConfig, sweep, "sweep")
    for key in ("seeds", "log_every", "out"):
        if key in raw:
            kw[key] = raw[key]
    if "out" in kw and not isinstance(kw["out"], str):
        raise ConfigError(f"out must be a string path, got {kw['out']!r}")
    return HarnessConfig(**kw)


def to_dict(cfg: HarnessConfig) -> dict:
    return {
        "encoder": cfg.encoder.to_dict(),
        "pretrain": asdict(cfg.pretrain),
        "method": peft.method_to_dict(cfg.method),
        "task": task_to_dict(cfg.task),
        "data": asdict(cfg.data),
        "optim": asdict(cfg.optim),
        "seeds": list(cfg.seeds),
        "sweep": {"lrs": list(cfg.sweep.lrs), "fractions": list(cfg.sweep.fractions),
                  "methods": [peft.method_to_dict(m) for m in cfg.sweep.methods]},
        "log_every": cfg.log_every,
        "out": cfg.out,
    }


def loads(text: str) -> HarnessConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return from_dict(raw)


def dumps(cfg: HarnessConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load(path) -> HarnessConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return loads(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
