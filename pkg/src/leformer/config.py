"""Flat ``key = value`` run configuration with ``model.``, ``train.`` and ``data.`` sections."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .model import ModelConfig, StageConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""
    split_ratio: tuple = (4, 1)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


_STAGE_FIELDS = ("K", "S", "P", "C", "R", "N", "L")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _parse_scalar(text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, Fraction):
            return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse {text!r} as {type(like).__name__}") from exc
    return text


def _parse(text: str, like):
    if isinstance(like, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        if like and len(parts) != len(like):
            raise ConfigError(f"expected {len(like)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(p, like[0] if like else "") for p in parts)
    return _parse_scalar(text, like)


def to_items(cfg: RunConfig) -> list:
    items = []
    m = cfg.model
    for f in dataclasses.fields(m):
        if f.name == "stages":
            for i, st in enumerate(m.stages):
                items.append((f"model.stage{i + 1}", _fmt(tuple(getattr(st, k) for k in _STAGE_FIELDS))))
        else:
            items.append((f"model.{f.name}", _fmt(getattr(m, f.name))))
    for section, obj in (("train", cfg.train), ("data", cfg.data)):
        for f in dataclasses.fields(obj):
            items.append((f"{section}.{f.name}", _fmt(getattr(obj, f.name))))
    return items


def dumps(cfg: RunConfig) -> str:
    lines = ["# leformer run configuration; stage = K, S, P, C, R, N, L"]
    lines += [f"{k} = {v}" for k, v in to_items(cfg)]
    return "\n".join(lines) + "\n"


def parse_lines(text: str, source: str = "<config>") -> list:
    pairs = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def apply(cfg: RunConfig, pairs) -> RunConfig:
    """Return a copy of ``cfg`` with each ``(key, text)`` assignment applied."""
    model_kw = {f.name: getattr(cfg.model, f.name) for f in dataclasses.fields(cfg.model)}
    stages = list(cfg.model.stages)
    train_kw = dataclasses.asdict(cfg.train)
    data_kw = dataclasses.asdict(cfg.data)
    sections = {"model": model_kw, "train": train_kw, "data": data_kw}
    for key, text in pairs:
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"unknown key {key!r}; keys look like model.x, train.x or data.x")
        if section == "model" and name.startswith("stage") and name[5:].isdigit():
            i = int(name[5:]) - 1
            if not 0 <= i < len(stages):
                raise ConfigError(f"unknown key {key!r}")
            vals = _parse(text, (0,) * len(_STAGE_FIELDS))
            stages[i] = StageConfig(**dict(zip(_STAGE_FIELDS, vals)))
            continue
        target = sections[section]
        if name not in target or (section == "model" and name == "stages"):
            raise ConfigError(f"unknown key {key!r}")
        target[name] = _parse(text, target[name])
    model_kw["stages"] = tuple(stages)
    try:
        return RunConfig(ModelConfig(**model_kw), TrainConfig(**train_kw), DataConfig(**data_kw))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def loads(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    return apply(base or RunConfig(), parse_lines(text, source))


def load(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    return loads(path.read_text(encoding="utf-8"), base, str(path))


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def desk_preset() -> RunConfig:
    """LEFormer-tiny with the CPU training recipe used for synthetic lake data."""
    return RunConfig(model=ModelConfig.tiny(), train=TrainConfig(lr=3e-3))
