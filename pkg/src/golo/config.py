"""Run configuration and its plain-text file format.

Files hold ``key = value`` lines grouped by ``[section]`` headers; a key may
also be written fully dotted (``model.channels = 64``), which works under
any header.  ``#`` starts a
comment.  Unknown keys and malformed values are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from golo.errors import ConfigError
from golo.losses import LossWeights


@dataclass
class ModelConfig:
    n_queries: int = 20
    channels: int = 64
    n_meta: int = 64
    k_mff: int = 16
    n_points: int = 8
    roi_size: int = 7
    heads: int = 4
    num_classes: int = 3
    backbone_width: int = 16
    roi_canonical: float = 56.0
    meta_init: bool = True
    use_mff: bool = True


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0


@dataclass
class ScheduleConfig:
    total_steps: int = 3000
    batch_size: int = 4
    drop1: float = 27 / 36
    drop2: float = 33 / 36
    checkpoint_every: int = 1000


@dataclass
class DataConfig:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12
    max_size: int = 30
    min_separation: int = 2
    noise: float = 0.04
    num_images: int = 64
    flip_prob: float = 0.5
    crop_prob: float = 0.0
    multiscale: bool = False
    min_short: int = 48
    max_short: int = 80
    max_long: int = 133


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    val_seed: int = 10_000
    out_dir: str = "runs/default"

    def validate(self) -> "Config":
        m = self.model
        for name in ("n_queries", "channels", "n_meta", "k_mff", "n_points", "roi_size", "heads",
                     "num_classes", "backbone_width"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if m.channels % m.heads:
            raise ConfigError(f"model.channels ({m.channels}) must be divisible by model.heads ({m.heads})")
        if self.optim.lr <= 0:
            raise ConfigError("optim.lr must be > 0")
        s = self.schedule
        if not 0 < s.drop1 < s.drop2 < 1:
            raise ConfigError("schedule drop fractions must be strictly increasing in (0, 1)")
        if s.total_steps < 1 or s.batch_size < 1:
            raise ConfigError("schedule.total_steps and schedule.batch_size must be >= 1")
        d = self.data
        if d.image_size % 32 or d.image_size < 32:
            raise ConfigError("data.image_size must be a positive multiple of 32")
        if not 0 <= d.min_objects <= d.max_objects:
            raise ConfigError("data object count range is invalid")
        if not 2 <= d.min_size <= d.max_size:
            raise ConfigError("data size range is invalid")
        for w in dataclasses.fields(self.loss):
            if getattr(self.loss, w.name) < 0:
                raise ConfigError(f"loss.{w.name} must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        lines = []
        top = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                lines.append(f"[{f.name}]")
                for sub in dataclasses.fields(value):
                    lines.append(f"{sub.name} = {_format(getattr(value, sub.name))}")
                lines.append("")
            else:
                top.append(f"{f.name} = {_format(value)}")
        return "\n".join(top + [""] + lines)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    return repr(value)


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
                return raw[1:-1]
            return raw
    except ValueError:
        pass
    raise ConfigError(f"invalid value for {key}: {raw!r}")


def _field_types(obj) -> dict:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            for f in dataclasses.fields(obj)}


def apply_override(cfg: Config, key: str, raw: str) -> None:
    parts = key.split(".")
    target = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(target) or p not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config section: {key}")
        target = getattr(target, p)
        if not dataclasses.is_dataclass(target):
            raise ConfigError(f"unknown config key: {key}")
    types = _field_types(target)
    name = parts[-1]
    if name not in types or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key: {key}")
    setattr(target, name, _parse_value(raw, types[name], key))


def loads(text: str) -> Config:
    cfg = Config()
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        # a dotted key names its section explicitly and ignores the current header
        apply_override(cfg, f"{section}.{key}" if section and "." not in key else key, raw)
    return cfg.validate()


def load(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)
