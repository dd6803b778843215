"""Run configuration: flat ``section.key = value`` files with CLI overrides.

Unknown sections or keys are rejected. Every field has a default; the
defaults describe the desk-scale experiment, ``preset = full`` switches the
generation/model/training defaults to the full-size experiment.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .equations import GenerationConfig
from .intervention import DEFAULT_R_GRID
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DESK_GENERATION = GenerationConfig(size=30_000, eval_size=1_500, max_ops=2, operand_min=1, operand_max=999)
FULL_GENERATION = GenerationConfig(size=200_000, eval_size=10_000, max_ops=5, operand_min=1, operand_max=1000)


@dataclass
class TraceConfig:
    template: str = "{a:3}-({b:3}-{c:3})"
    instances: int = 2000
    k: int = 10
    layers: str = ""  # comma list; empty = every block output 1..num_layers


@dataclass
class ManipulateConfig:
    label: str = "b"
    slot: str = ""  # empty = same as label
    base: str = "a=617,b=555,c=602"
    r_grid: str = "-1:3:41"  # "lo:hi:count" or comma list
    value_min: int | None = None
    value_max: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "desk"
    gen: GenerationConfig = DESK_GENERATION
    model: ModelConfig = field(default_factory=ModelConfig.desk_scale)
    train: TrainConfig = field(default_factory=TrainConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    manipulate: ManipulateConfig = field(default_factory=ManipulateConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = ("gen", "model", "train", "trace", "manipulate")
GLOBAL_KEYS = ("seed", "preset")


def _coerce(raw: str, annotation, where: str):
    hints = typing.get_args(annotation) or (annotation,)
    text = raw.strip()
    if type(None) in hints and text.lower() in ("", "none", "null"):
        return None
    for hint in hints:
        if hint is type(None):
            continue
        try:
            if hint is bool:
                if text.lower() in ("true", "1", "yes"):
                    return True
                if text.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(text)
            if hint is int:
                return int(text)
            if hint is float:
                return float(text)
            if hint is str:
                return text
        except ValueError:
            continue
    raise ConfigError(f"{where}: cannot read {raw!r} as {annotation}")


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_assignments(lines: typing.Iterable[str], origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(assignments: dict[str, str]) -> RunConfig:
    """Resolve a RunConfig from ``section.key -> text``; rejects unknown keys."""
    preset = assignments.get("preset", "desk").strip()
    if preset not in ("desk", "full"):
        raise ConfigError(f"preset must be 'desk' or 'full', got {preset!r}")
    cfg = RunConfig(preset=preset)
    if preset == "full":
        cfg.gen = FULL_GENERATION
        cfg.model = ModelConfig.full_scale()
    seed_text = assignments.get("seed", os.environ.get("TML_SEED", "0"))
    cfg.seed = _coerce(seed_text, int, "seed")
    # Component seeds follow the global seed unless set explicitly.
    cfg.model = dataclasses.replace(cfg.model, seed=cfg.seed)
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)

    per_section: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, value in assignments.items():
        if key in GLOBAL_KEYS:
            continue
        section, _, name = key.partition(".")
        if section not in per_section or not name:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(cfg, section)
        types = _field_types(type(target))
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        per_section[section][name] = _coerce(value, types[name], key)
    for section, values in per_section.items():
        if values:
            setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values))
    try:
        cfg.gen.validate()
        cfg.model.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    assignments: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        assignments.update(parse_assignments(text.splitlines(), str(path)))
    assignments.update(overrides or {})
    return build_config(assignments)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"preset = {cfg.preset}"]
    for section in SECTIONS:
        for name, value in dataclasses.asdict(getattr(cfg, section)).items():
            lines.append(f"{section}.{name} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


def parse_r_grid(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return list(DEFAULT_R_GRID)
    try:
        if ":" in text:
            lo, hi, count = text.split(":")
            n = int(count)
            if n < 1:
                raise ValueError
            return [float(x) for x in np.linspace(float(lo), float(hi), n)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad r grid {text!r}; use 'lo:hi:count' or a comma list") from None


def parse_bindings(text: str) -> dict[str, int]:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        name, _, value = part.partition("=")
        try:
            out[name.strip()] = int(value)
        except ValueError:
            raise ConfigError(f"bad binding {part!r}; use name=value") from None
    return out


def parse_layers(text: str, num_layers: int) -> list[int]:
    if not text.strip():
        return list(range(1, num_layers + 1))
    try:
        layers = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise ConfigError(f"bad layer list {text!r}") from None
    for layer in layers:
        if not 0 <= layer <= num_layers:
            raise ConfigError(f"layer {layer} outside [0, {num_layers}]")
    return layers
