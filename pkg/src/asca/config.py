"""Run configuration as one flat ``section.key -> value`` mapping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .frontend import FrontendParams
from .model import ArchSpec, parse_arch_spec
from .tensor import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "C-C-C-T"
    preset: str = "desk"
    window: int = 7
    num_heads: int = 0

    def build(self, num_classes: int) -> ArchSpec:
        return parse_arch_spec(self.arch, self.preset, num_classes, self.window, self.num_heads)


@dataclass(frozen=True)
class Paths:
    manifest: str | None = None
    classes: str | None = None
    audio_root: str | None = None
    out_dir: str | None = None


def _train_config():
    from .train import TrainConfig

    return TrainConfig()


@dataclass(frozen=True)
class RunConfig:
    frontend: FrontendParams = field(default_factory=FrontendParams)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: object = field(default_factory=_train_config)
    model: ModelConfig = field(default_factory=ModelConfig)
    paths: Paths = field(default_factory=Paths)

    def flat(self) -> dict:
        out = {}
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f"{sec.name}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, flat: dict, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        sections: dict[str, dict] = {}
        for key, value in flat.items():
            sec, _, name = key.partition(".")
            if sec not in {f.name for f in fields(base)}:
                raise ConfigError(f"unknown config section in key {key!r}")
            obj = getattr(base, sec)
            names = {f.name for f in fields(obj)}
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(getattr(obj, name), tuple) and isinstance(value, list):
                value = tuple(value)
            sections.setdefault(sec, {})[name] = value
        updated = {sec: replace(getattr(base, sec), **kv) for sec, kv in sections.items()}
        return replace(base, **updated)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.flat(), indent=2, sort_keys=True) + "\n")


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_run_config(path=None, overrides=()) -> RunConfig:
    flat = {}
    if path is not None:
        flat.update(json.loads(Path(path).read_text()))
    flat.update(dict(parse_override(o) for o in overrides))
    return RunConfig.from_flat(flat)
