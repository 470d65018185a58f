"""Run configuration: one flat ``key = value`` file for a whole experiment.

Keys are either top-level (``condition``, ``folds``, ``seed``, ``budgets``,
``target_dbfs``, ``segment_seconds``, ``subtract_alpha``, ``subtract_beta``,
``allow_resample``) or prefixed with ``model.`` / ``train.`` to reach the
corresponding dataclass field, e.g. ``model.num_blocks = 6`` or
``train.epochs = 5``. ``model.classes`` is derived from the condition.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .audio_io import SubtractionParams
from .errors import ConfigError
from .evaluation import CONDITIONS, DEFAULT_BUDGETS, budget_name, class_count, parse_budgets
from .gcnn_model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    condition: str = "dvh"
    folds: int = 10
    seed: int = 0
    budgets: tuple[float, ...] = DEFAULT_BUDGETS
    target_dbfs: float | None = None  # None: mean RMS dBFS of the dataset
    segment_seconds: float = 4.0
    subtract_alpha: float = 1.0
    subtract_beta: float = 0.01
    allow_resample: bool = False

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ConfigError(f"condition must be one of {CONDITIONS}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.segment_seconds <= 0:
            raise ConfigError("segment_seconds must be positive")
        if self.model.classes != class_count(self.condition):
            object.__setattr__(self, "model", replace(self.model, classes=class_count(self.condition)))
        try:
            self.subtraction
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def subtraction(self) -> SubtractionParams:
        return SubtractionParams(over_subtraction=self.subtract_alpha, spectral_floor=self.subtract_beta)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("model", "train"):
                for sub in fields(value):
                    v = getattr(value, sub.name)
                    if v is not None:
                        lines.append(f"{f.name}.{sub.name} = {_fmt(v)}")
            elif f.name == "budgets":
                lines.append(f"budgets = {','.join(budget_name(b) for b in value)}")
            elif value is not None:
                lines.append(f"{f.name} = {_fmt(value)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(text: str, default, name: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
        if isinstance(default, tuple) or name == "class_weights":
            return tuple(float(x) for x in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def _defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    top, model, train = {}, {}, {}
    top_defaults = _defaults(RunConfig)
    model_defaults = _defaults(ModelConfig)
    train_defaults = _defaults(TrainConfig)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        if key.startswith("model."):
            name = key[6:]
            if name not in model_defaults:
                raise ConfigError(f"line {lineno}: unknown model key {name!r}")
            model[name] = _coerce(value, model_defaults[name], name)
        elif key.startswith("train."):
            name = key[6:]
            if name not in train_defaults:
                raise ConfigError(f"line {lineno}: unknown train key {name!r}")
            train[name] = _coerce(value, train_defaults[name], name)
        elif key == "budgets":
            top[key] = parse_budgets(value)
        elif key == "condition":
            top[key] = value
        elif key in top_defaults and key not in ("model", "train"):
            top[key] = _coerce(value, top_defaults[key], key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return replace(
            base,
            model=replace(base.model, **model),
            train=replace(base.train, **train),
            **top,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(path.read_text())
