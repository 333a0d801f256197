"""YAML run configuration: model fields, trainer settings and paths in one flat document."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .core_types import ModelConfig
from .trainer import TrainSettings

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))
SETTINGS_KEYS = tuple(f.name for f in dataclasses.fields(TrainSettings))
PATH_KEYS = ("train_manifest", "eval_manifest", "out_dir")
RUN_KEYS = ("iterations", "seeds")
KNOWN_KEYS = MODEL_KEYS + SETTINGS_KEYS + PATH_KEYS + RUN_KEYS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfigFile:
    model: ModelConfig = field(default_factory=ModelConfig)
    settings: TrainSettings = field(default_factory=TrainSettings)
    train_manifest: Optional[Path] = None
    eval_manifest: Optional[Path] = None
    out_dir: Path = Path("run")
    iterations: int = 1000
    seeds: tuple[int, ...] = (1, 2, 3)

    @classmethod
    def from_mapping(cls, raw: dict, base_dir: Path = Path(".")) -> "RunConfigFile":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a mapping of keys to values")
        unknown = sorted(set(raw) - set(KNOWN_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            model = ModelConfig(**{k: raw[k] for k in MODEL_KEYS if k in raw})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model setting: {exc}") from exc
        settings = TrainSettings(**{k: raw[k] for k in SETTINGS_KEYS if k in raw})
        settings.betas = tuple(settings.betas)
        if settings.batch_size < 1 or settings.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if not settings.lr > 0:
            raise ConfigError("lr must be positive")
        paths = {}
        for key in PATH_KEYS:
            if raw.get(key) is not None:
                p = Path(raw[key]).expanduser()
                paths[key] = (p if p.is_absolute() else base_dir / p).resolve()
        iterations = int(raw.get("iterations", cls.iterations))
        if iterations < 1:
            raise ConfigError("iterations must be at least 1")
        seeds = raw.get("seeds", cls.seeds)
        seeds = (seeds,) if isinstance(seeds, int) else tuple(int(s) for s in seeds)
        if not seeds:
            raise ConfigError("seeds must list at least one seed")
        return cls(model=model, settings=settings, iterations=iterations, seeds=seeds,
                   **{"out_dir": Path("run").resolve(), **paths})

    @classmethod
    def load(cls, path) -> "RunConfigFile":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_mapping(raw, path.parent)

    def to_mapping(self) -> dict:
        out = dataclasses.asdict(self.model)
        out.update(dataclasses.asdict(self.settings))
        for key in PATH_KEYS:
            value = getattr(self, key)
            if value is not None:
                out[key] = str(value)
        out["iterations"] = self.iterations
        out["seeds"] = list(self.seeds)
        # yaml has no tuples
        return {k: (list(map(list, v)) if k == "backbone_blocks" else list(v) if isinstance(v, tuple) else v)
                for k, v in out.items()}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_mapping(), sort_keys=True)

    def require_manifest(self, key: str) -> Path:
        path = getattr(self, key)
        if path is None:
            raise ConfigError(f"{key} is not set")
        manifest = path / "manifest.json" if path.is_dir() else path
        if not manifest.is_file():
            raise ConfigError(f"{key} does not exist: {manifest}")
        return manifest

    def check_out_dir(self) -> Path:
        out = self.out_dir
        if out.exists() and not out.is_dir():
            raise ConfigError(f"out_dir is not a directory: {out}")
        anchor = out
        while not anchor.exists():
            anchor = anchor.parent
        if not anchor.is_dir():
            raise ConfigError(f"cannot create out_dir under {anchor}")
        return out
