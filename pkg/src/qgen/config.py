"""Flat ``key=value`` config files.

Blank lines and lines starting with ``#`` are ignored.  Values are coerced
to the type of the matching dataclass field; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .evaluator import EvaluatorConfig
from .generator import GeneratorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    rate: float = 0.15
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    holdout_fraction: float = 0.1
    skip_pretrain: bool = False  # freeze a randomly initialised encoder instead
    corpus: str = "questions"  # or "questions+contexts"

    def __post_init__(self):
        if self.corpus not in ("questions", "questions+contexts"):
            raise ValueError(f"corpus={self.corpus!r} must be 'questions' or 'questions+contexts'")
        if not 0.0 <= self.rate <= 0.5:
            raise ValueError(f"rate={self.rate} outside [0, 0.5]")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path: str | Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _coerce(key: str, value: str, kind: Any) -> Any:
    name = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if name == "bool":
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {name}") from None


def _fields(cls) -> dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def build(cls, values: dict[str, str], **fixed):
    """Instantiate ``cls`` from the subset of ``values`` naming its fields."""
    kinds = _fields(cls)
    kwargs = {k: _coerce(k, v, kinds[k]) for k, v in values.items() if k in kinds}
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def check_keys(values: dict[str, str], classes: Iterable[type], ignore: Iterable[str] = ()) -> None:
    allowed = set(ignore)
    for cls in classes:
        allowed |= set(_fields(cls))
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


# Fields filled from the data rather than from the file.
_DERIVED = {"vocab_size"}


def train_configs(values: dict[str, str], vocab_size: int) -> tuple[TrainConfig, GeneratorConfig]:
    """Split one flat mapping into the training and generator configs.

    Shared names (``seed``, ``max_src_len``, ``max_tgt_len``) feed both.
    """
    check_keys(values, (TrainConfig, GeneratorConfig))
    if _DERIVED & set(values):
        raise ConfigError("vocab_size is taken from the vocabulary and may not be set")
    tc = build(TrainConfig, values)
    gc = build(GeneratorConfig, values, vocab_size=vocab_size)
    problems = gc.violations()
    if problems:
        raise ConfigError("invalid generator config: " + "; ".join(problems))
    return tc, gc


def pretrain_configs(values: dict[str, str], vocab_size: int) -> tuple[PretrainConfig, EvaluatorConfig]:
    check_keys(values, (PretrainConfig, EvaluatorConfig))
    if _DERIVED & set(values):
        raise ConfigError("vocab_size is taken from the vocabulary and may not be set")
    ec = build(EvaluatorConfig, values, vocab_size=vocab_size)
    problems = ec.violations()
    if problems:
        raise ConfigError("invalid evaluator config: " + "; ".join(problems))
    return build(PretrainConfig, values), ec


def dump_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
