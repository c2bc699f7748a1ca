"""Run configuration: one YAML file with every stage's settings written out."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import DecoderConfig, EncoderConfig
from .finetune import FinetuneConfig
from .pretrain import PretrainConfig

PROTOCOLS = ("kfold", "holdout", "train")


class ConfigError(ValueError):
    pass


@dataclass
class SplitConfig:
    protocol: str = "kfold"
    folds: int = 5
    ratio: list[int] = field(default_factory=lambda: [7, 2])

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"invalid split field: protocol={self.protocol!r} (choose from {PROTOCOLS})")
        if self.folds < 1:
            raise ValueError(f"invalid split field: folds={self.folds!r}")
        want = 3 if self.protocol == "holdout" else 2
        if self.protocol != "train" and (len(self.ratio) != want or min(self.ratio) < 1):
            raise ValueError(f"invalid split field: ratio={self.ratio!r} needs {want} positive parts")


@dataclass
class RunConfig:
    seed: int = 0
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    split: SplitConfig = field(default_factory=SplitConfig)

    def __post_init__(self):
        self.pretrain.seed = self.seed
        self.finetune.seed = self.seed
        if self.pretrain.encoder != self.finetune.encoder:
            raise ValueError("invalid config: pretrain.encoder and finetune.encoder must match")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    data = dict(data)
    for sub, sub_cls in (("encoder", EncoderConfig), ("decoder", DecoderConfig)):
        if sub in names and sub in data:
            data[sub] = _build(sub_cls, data[sub], f"{where}.{sub}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    unknown = sorted(set(d) - {"seed", "pretrain", "finetune", "split"})
    if unknown:
        raise ConfigError(f"config: unknown field(s) {unknown}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"config.seed: expected a non-negative integer, got {seed!r}")
    pre = _build(PretrainConfig, d.get("pretrain"), "pretrain")
    fine = _build(FinetuneConfig, d.get("finetune"), "finetune")
    split = _build(SplitConfig, d.get("split"), "split")
    try:
        return RunConfig(seed, pre, fine, split)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)
