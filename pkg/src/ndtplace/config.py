"""Flat ``key = value`` run configuration covering every pipeline stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .condenser import CondenserConfig
from .metric import TrainSchedule
from .model import ModelConfig


class ConfigError(ValueError):
    pass


PATH_KEYS = ("data", "maps", "checkpoint", "loss_csv", "descriptors", "database", "queries", "report")
SCALAR_KEYS = {"seed": 0, "workers": 1, "runs": 4, "route_len": 800.0, "noise": 0.03, "top_n": 25}
# the model's expected cardinality is the condenser's target
SHARED = {"k"}


def _section_keys(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in fields(cls)}


SECTIONS = {
    "condenser": _section_keys(CondenserConfig),
    "model": {n: f for n, f in _section_keys(ModelConfig).items() if n not in SHARED},
    "schedule": _section_keys(TrainSchedule),
}


def known_keys() -> list[str]:
    keys = [*SCALAR_KEYS, *PATH_KEYS]
    for sec in SECTIONS.values():
        keys.extend(sec)
    return keys


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _coerce(key: str, raw: str, like):
    """Parse ``raw`` using the default's type; ``none`` parses to None where allowed."""
    text = raw.strip()
    if text.lower() == "none":
        return None
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        # the only None-defaulted keys are width tuples
        if isinstance(like, tuple) or like is None:
            return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    condenser: CondenserConfig = field(default_factory=CondenserConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    seed: int = 0
    workers: int = 1
    runs: int = 4
    route_len: float = 800.0
    noise: float = 0.03
    top_n: int = 25
    paths: dict[str, str] = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        """Model config with the cardinality pinned to the condenser's k."""
        return replace(self.model, k=self.condenser.k)

    def to_text(self) -> str:
        lines = [f"{k} = {_format(getattr(self, k))}" for k in SCALAR_KEYS]
        for name, keys in SECTIONS.items():
            section = getattr(self, name)
            lines.append(f"# {name}")
            lines.extend(f"{k} = {_format(getattr(section, k))}" for k in keys)
        lines.extend(f"{k} = {v}" for k, v in sorted(self.paths.items()))
        return "\n".join(lines) + "\n"


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        pairs[key.replace("-", "_")] = value
    return pairs


def build(pairs: dict[str, str]) -> RunConfig:
    """RunConfig from raw string pairs; unknown keys are rejected."""
    allowed = set(known_keys())
    unknown = sorted(set(pairs) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig()
    try:
        for name, keys in SECTIONS.items():
            updates = {k: _coerce(k, pairs[k], _default(f)) for k, f in keys.items() if k in pairs}
            if updates:
                setattr(cfg, name, replace(getattr(cfg, name), **updates))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for k, default in SCALAR_KEYS.items():
        if k in pairs:
            setattr(cfg, k, _coerce(k, pairs[k], default))
    cfg.paths = {k: pairs[k] for k in PATH_KEYS if k in pairs}
    return cfg


def load(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read ``path`` (if given) and apply ``overrides`` on top."""
    pairs = {}
    if path is not None:
        pairs.update(parse_pairs(Path(path).read_text(), str(path)))
    pairs.update(overrides or {})
    return build(pairs)
