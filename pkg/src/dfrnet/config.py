"""Flat ``dotted.key = value`` run configuration.

Precedence, lowest to highest: built-in defaults, the config file, command-line
flags. Lines starting with ``#`` and blank lines are ignored.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .tensor import ConfigurationError
from .toy import TrainConfig

# dotted key -> (TrainConfig field, type); eval-only keys map to RunConfig fields
TRAIN_KEYS = {
    "train.steps": ("steps", int),
    "train.lr": ("lr", float),
    "train.momentum": ("momentum", float),
    "train.weight_decay": ("weight_decay", float),
    "train.lr_power": ("lr_power", float),
    "train.seed": ("seed", int),
    "train.batch_size": ("batch_size", int),
    "train.grad_clip": ("grad_clip", float),
    "train.app_loss_scale": ("app_loss_scale", float),
    "model.channels": ("channels", int),
    "alfr.enabled": ("use_alfr", bool),
    "alfr.reduction": ("reduction", int),
    "alfr.self_reflect": ("self_reflect", bool),
    "alfr.flow": ("alfr_flow", str),
    "dit.enabled": ("use_dit", bool),
    "dit.variant": ("dit_variant", str),
    "tasks.rot_stream": ("rot_stream", str),
    "tasks.whl_stream": ("whl_stream", str),
}
EVAL_KEYS = {
    "eval.scenes": ("n_eval", int),
    "eval.iou": ("iou", float),
    "eval.mode": ("mode", str),
    "eval.score_thresh": ("score_thresh", float),
    "eval.gt_dir": ("gt_dir", str),
    "eval.det_dir": ("det_dir", str),
    "eval.category": ("category", str),
    "ablate.table": ("table", str),
    "ablate.seeds": ("seeds", str),
}
KEYS = {**TRAIN_KEYS, **EVAL_KEYS}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    n_eval: int = 200
    iou: float = 0.5
    mode: str = "r40"
    score_thresh: float = 0.75
    gt_dir: str = ""
    det_dir: str = ""
    category: str = "car"
    table: str = "table4"
    seeds: str = "0,1,2,3,4"

    @property
    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigurationError(f"ablate.seeds must be comma-separated integers, got {self.seeds!r}") from None

    def with_values(self, values: dict[str, Any]) -> "RunConfig":
        """Return a copy with dotted keys overridden (values already typed or strings)."""
        train_kw, run_kw = {}, {}
        for key, raw in values.items():
            if key not in KEYS:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            name, typ = KEYS[key]
            value = _coerce(key, raw, typ)
            (train_kw if key in TRAIN_KEYS else run_kw)[name] = value
        train = replace(self.train, **train_kw)
        out = replace(self, train=train, **run_kw)
        out.validate()
        return out

    def validate(self) -> None:
        self.train.validate()
        if self.mode.lower() not in ("r11", "r40"):
            raise ConfigurationError(f"eval.mode must be r11 or r40, got {self.mode!r}")
        if not 0.0 < self.iou <= 1.0:
            raise ConfigurationError(f"eval.iou must lie in (0, 1], got {self.iou}")
        if self.n_eval < 1:
            raise ConfigurationError("eval.scenes must be at least 1")
        self.seed_list

    def to_dotted(self) -> dict[str, Any]:
        out = {}
        for key, (name, _) in KEYS.items():
            out[key] = getattr(self.train if key in TRAIN_KEYS else self, name)
        return out


def _coerce(key: str, raw: Any, typ: type):
    if not isinstance(raw, str):
        if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, typ):
            return raw
        raise ConfigurationError(f"{key}: expected {typ.__name__}, got {raw!r}")
    text = raw.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    if typ is str:
        return text
    try:
        return typ(text)
    except ValueError:
        raise ConfigurationError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


class ConfigKeyError(ConfigurationError):
    def __init__(self, key: str, line: int):
        self.key, self.line = key, line
        super().__init__(f"line {line}: unknown configuration key {key!r}")


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in KEYS:
            raise ConfigKeyError(key, lineno)
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.split("#", 1)[0].strip()
    return values


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.with_values(parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = cfg.with_values(overrides)
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dotted().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def default_keys() -> list[str]:
    return list(KEYS)

