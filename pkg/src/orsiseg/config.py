"""Model and training hyperparameters, plus the ``key = value`` config format.

Format rules:

* one ``key = value`` pair per line, UTF-8;
* ``#`` starts a comment (whole line or trailing);
* list values are comma separated, optionally wrapped in ``[]`` or ``()``;
* booleans accept ``true/false/yes/no/1/0``.

Unknown keys are rejected. Keys not present take their defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for unreadable, malformed or invariant-violating configs."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


def _tuple(values) -> tuple:
    return tuple(int(v) for v in values)


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (64, 128, 320, 512)
    stage_depths: tuple[int, ...] = (3, 4, 6, 3)
    stage_heads: tuple[int, ...] = (1, 2, 5, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    ffn_expansion: int = 4
    decoder_channels: int = 128
    input_size: tuple[int, int] = (352, 352)
    local_kernels: tuple[int, ...] = (3, 5, 7)
    sem_dilations: tuple[int, ...] = (1, 3, 5, 7)

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (list, tuple)):
                object.__setattr__(self, f.name, _tuple(value))
        self.validate()

    def validate(self) -> None:
        for name in ("stage_channels", "stage_depths", "stage_heads", "sr_ratios"):
            value = getattr(self, name)
            if len(value) != 4:
                raise ConfigError(f"expected 4 values, got {len(value)}", key=name)
            if any(v < 1 for v in value):
                raise ConfigError("all values must be positive", key=name)
        ch = self.stage_channels
        if any(b <= a for a, b in zip(ch, ch[1:])):
            raise ConfigError("must be strictly increasing", key="stage_channels")
        for c, h in zip(ch, self.stage_heads):
            if c % h:
                raise ConfigError(f"channel width {c} not divisible by {h} heads", key="stage_heads")
        if self.ffn_expansion < 1:
            raise ConfigError("must be positive", key="ffn_expansion")
        for c in ch:
            if (self.ffn_expansion * c) % 4:
                raise ConfigError(
                    f"hidden width {self.ffn_expansion * c} not divisible by 4", key="ffn_expansion"
                )
        if self.decoder_channels < 1:
            raise ConfigError("must be positive", key="decoder_channels")
        if len(self.input_size) != 2 or any(s < 1 for s in self.input_size):
            raise ConfigError("expected two positive integers", key="input_size")
        if any(s % 32 for s in self.input_size):
            raise ConfigError(f"{self.input_size} not divisible by 32", key="input_size")
        if self.local_kernels != (3, 5, 7):
            raise ConfigError("local kernels are fixed at 3, 5, 7", key="local_kernels")
        if self.sem_dilations != (1, 3, 5, 7):
            raise ConfigError("SEM dilations are fixed at 1, 3, 5, 7", key="sem_dilations")

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(self.ffn_expansion * c for c in self.stage_channels)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 40
    batch_size: int = 4
    epochs: int = 80
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("must be positive", key="learning_rate")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("must lie in (0, 1)", key="lr_decay_factor")
        for name in ("lr_decay_every", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError("must be a positive integer", key=name)

    def lr_at(self, epoch: int) -> float:
        """Step-decayed learning rate for a 1-based epoch index."""
        return self.learning_rate * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)


def default_paper_config() -> ModelConfig:
    """Full-scale model: ~38.9M encoder and ~44.2M total parameters at 352x352."""
    return ModelConfig()


def desk_config() -> ModelConfig:
    """Small model for CPU smoke runs at 96x96."""
    return ModelConfig(
        stage_channels=(16, 32, 64, 128),
        stage_depths=(1, 1, 1, 1),
        stage_heads=(1, 2, 4, 8),
        sr_ratios=(8, 4, 2, 1),
        ffn_expansion=2,
        decoder_channels=32,
        input_size=(96, 96),
    )


def desk_train_config() -> TrainConfig:
    """Short overfit schedule for the desk model: 50 epochs of 16 images is 200 iterations."""
    return TrainConfig(learning_rate=1e-3, epochs=50, augment=False)


PRESETS = {
    "paper": (default_paper_config, TrainConfig),
    "desk": (desk_config, desk_train_config),
}


def resolve_config(name_or_path: str | Path | None) -> tuple[ModelConfig, TrainConfig]:
    """A preset name (``paper``, ``desk``), a config file path, or None for ``paper``."""
    if name_or_path is None:
        name_or_path = "paper"
    if str(name_or_path) in PRESETS:
        model_fn, train_fn = PRESETS[str(name_or_path)]
        return model_fn(), train_fn()
    return load_config(name_or_path)


_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str, default: Any, line: int) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            inner = raw.strip("[]() ")
            if not inner:
                return ()
            return tuple(int(v.strip()) for v in inner.split(","))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}", key=key, line=line) from None
    raise ConfigError("unsupported value type", key=key, line=line)


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    model_kw: dict[str, Any] = {}
    train_kw: dict[str, Any] = {}
    model_defaults = ModelConfig()
    train_defaults = TrainConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _MODEL_KEYS:
            model_kw[key] = _parse_value(key, raw, getattr(model_defaults, key), lineno)
        elif key in _TRAIN_KEYS:
            train_kw[key] = _parse_value(key, raw, getattr(train_defaults, key), lineno)
        else:
            raise ConfigError("unknown key", key=key, line=lineno)
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = ["# model"]
    lines += [f"{k} = {_format_value(v)}" for k, v in dataclasses.asdict(model).items()]
    if train is not None:
        lines.append("# training")
        lines += [f"{k} = {_format_value(v)}" for k, v in dataclasses.asdict(train).items()]
    return "\n".join(lines) + "\n"


def config_to_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def model_config_from_dict(data: dict) -> ModelConfig:
    unknown = set(data) - set(_MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return ModelConfig(**data)


def train_config_from_dict(data: dict) -> TrainConfig:
    unknown = set(data) - set(_TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return TrainConfig(**data)
