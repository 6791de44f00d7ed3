"""Run configuration: TOML file, section dataclasses, CLI overrides, content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backends import BACKEND_NAMES
from .inversion import InversionConfig
from .pipeline import GenerationConfig


class ConfigError(ValueError):
    pass


@dataclass
class BackendConfig:
    name: str = "mock"
    mock_seed: int = 0
    device: str = "cpu"
    checkpoints: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in BACKEND_NAMES:
            raise ValueError(f"backend.name must be one of {BACKEND_NAMES}, got {self.name!r}")


@dataclass
class AnchorConfig:
    mode: str = "caption"
    length: int = 8
    iters: int = 200
    lr: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("pez", "caption", "user"):
            raise ValueError(f"anchor.mode must be pez, caption or user, got {self.mode!r}")
        if self.length < 1 or self.iters < 1:
            raise ValueError("anchor.length and anchor.iters must be >= 1")

    def options(self) -> dict:
        return {"length": self.length, "iters": self.iters, "lr": self.lr, "seed": self.seed}


@dataclass
class EvalConfig:
    count: int = 300
    seed: int = 0
    dino: bool = False


OPTIM_KEYS = tuple(f.name for f in dataclasses.fields(InversionConfig) if f.name != "anchor_mode")


@dataclass
class RunConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    optim: InversionConfig = field(default_factory=InversionConfig)
    pipeline: GenerationConfig = field(default_factory=GenerationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"
    run_id: str = ""
    workers: int = 1

    def __post_init__(self):
        # the anchor section is the single source for the anchor mode
        self.optim.anchor_mode = self.anchor.mode

    # -- (de)serialization --------------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["optim"].pop("anchor_mode", None)
        return d

    def model_dict(self) -> dict:
        """Sections that influence artifacts (bookkeeping keys excluded)."""
        d = self.to_dict()
        for key in ("output_dir", "run_id", "workers"):
            d.pop(key)
        d.pop("eval")
        d["backend"].pop("device")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.model_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def resolved_run_id(self) -> str:
        return self.run_id or f"run-{self.hash()[:10]}"

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.resolved_run_id()

    def snapshot(self) -> str:
        return json.dumps({"config_hash": self.hash(), "config": self.model_dict()}, indent=2, sort_keys=True) + "\n"


SECTIONS = {
    "backend": (BackendConfig, tuple(f.name for f in dataclasses.fields(BackendConfig))),
    "anchor": (AnchorConfig, tuple(f.name for f in dataclasses.fields(AnchorConfig))),
    "optim": (InversionConfig, OPTIM_KEYS),
    "pipeline": (GenerationConfig, tuple(f.name for f in dataclasses.fields(GenerationConfig))),
    "eval": (EvalConfig, tuple(f.name for f in dataclasses.fields(EvalConfig))),
}
TOP_LEVEL = ("output_dir", "run_id", "workers")


def from_dict(data: dict[str, Any]) -> RunConfig:
    unknown = set(data) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    try:
        for name, (cls, keys) in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table")
            bad = set(section) - set(keys)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = cls(**section)
        for key in TOP_LEVEL:
            if key in data:
                kwargs[key] = data[key]
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[str | Path] = None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return from_dict(data)


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Return a copy with CLI-style overrides applied; ``None`` values are ignored."""
    data = cfg.to_dict()
    mapping = {
        "backend": ("backend", "name"),
        "alpha": ("optim", "alpha"),
        "tokens": ("optim", "n_tokens"),
        "lambda_tc": ("optim", "lambda_tc"),
        "lambda_clip": ("optim", "lambda_clip"),
        "iterations": ("optim", "iterations"),
        "anchor_mode": ("anchor", "mode"),
        "strength": ("pipeline", "strength"),
        "steps": ("pipeline", "steps"),
        "guidance": ("pipeline", "guidance"),
        "reverse": ("pipeline", "reverse"),
        "count": ("eval", "count"),
    }
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "seed":
            for section in ("optim", "pipeline", "anchor", "eval"):
                data[section]["seed"] = int(value)
        elif key in TOP_LEVEL:
            data[key] = value
        elif key in mapping:
            section, name = mapping[key]
            data[section][name] = value
        else:
            raise ConfigError(f"unknown override {key!r}")
    return from_dict(data)
