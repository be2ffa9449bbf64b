"""Run configuration and its plain-text ``key = value`` form.

Keys live in three dotted sections, ``model.``, ``trainer.`` and ``data.``.
``model.variant`` selects a preset; other ``model.*`` keys override it.
Lists are comma separated (``2,2,4,2``), booleans are ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .data import AUGMENTS, DATASETS
from .errors import ConfigurationError
from .model import PRESETS, ModelConfig, preset


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple[int, ...] = (100, 150)
    lr_gamma: float = 0.1
    label_smoothing: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    out_dir: str = "runs"
    eval_batch_size: int = 1000
    # off by default so that identical runs give byte-identical histories
    wall_clock: bool = False

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigurationError("trainer.lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("trainer.momentum must lie in [0, 1)")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("trainer.label_smoothing must lie in [0, 1)")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ConfigurationError("trainer.lr_milestones must be strictly increasing")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("batch sizes must be positive")
        if self.weight_decay < 0 or self.checkpoint_every < 0 or self.epochs < 0:
            raise ConfigurationError("weight_decay, checkpoint_every and epochs must be non-negative")
        return self


@dataclass
class DataConfig:
    dataset: str = "mnist"
    data_dir: str = "data"
    augment: str = "none"
    target_size: int = 32
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()
    train_limit: int = 0  # 0 keeps every sample
    test_limit: int = 0

    def __post_init__(self):
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)

    def validate(self) -> "DataConfig":
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"data.dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.augment not in AUGMENTS:
            raise ConfigurationError(f"data.augment must be one of {AUGMENTS}, got {self.augment!r}")
        if self.train_limit < 0 or self.test_limit < 0:
            raise ConfigurationError("data.train_limit and data.test_limit must be non-negative")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: preset("desk"))
    trainer: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.trainer.validate()
        self.data.validate()
        return self

    def to_text(self) -> str:
        lines = []
        for section in ("model", "trainer", "data"):
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


SECTIONS = {"model": ModelConfig, "trainer": TrainConfig, "data": DataConfig}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key: str, raw: str, hint):
    raw = raw.strip()
    origin = getattr(hint, "__origin__", None)
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if origin is tuple:
            inner = hint.__args__[0]
            body = raw.strip("[]() ")
            return tuple(inner(p) for p in body.split(",") if p.strip()) if body else ()
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from None
    raise ConfigurationError(f"{key}: unsupported field type {hint}")


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def build_config(pairs: list[tuple[str, str]]) -> RunConfig:
    """Apply ``(key, value)`` pairs in order; later pairs win."""
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    for key, raw in pairs:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigurationError(f"unknown key {key!r}; keys start with model., trainer. or data.")
        hints = get_type_hints(SECTIONS[section])
        if name not in hints:
            raise ConfigurationError(f"unknown key {key!r}")
        values[section][name] = _parse_value(key, raw, hints[name])
    mv = values["model"]
    variant = mv.pop("variant", "desk")
    if variant in PRESETS:
        model = preset(variant, **mv)
    elif variant == "custom":
        model = ModelConfig(**mv, variant=variant)
    else:
        raise ConfigurationError(f"model.variant must be 'custom' or one of {sorted(PRESETS)}, got {variant!r}")
    return RunConfig(model, TrainConfig(**values["trainer"]), DataConfig(**values["data"]))


def parse_config(text: str, overrides: list[str] | None = None, source: str = "<config>") -> RunConfig:
    pairs = parse_pairs(text, source)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return build_config(pairs)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file {p} not found")
        text = p.read_text(encoding="utf-8")
    return parse_config(text, overrides, source=str(path or "<defaults>"))
