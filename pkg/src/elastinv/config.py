"""JSON run configuration.

Every section maps onto a dataclass; unknown keys are rejected so a typo
cannot silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .critic import TrainConfig
from .errors import InvalidInputError
from .fem import LoadSpec, MeshModel
from .phantom import PhantomSpec
from .reconstruct import ReconConfig


class ConfigError(InvalidInputError):
    pass


@dataclass
class MeshConfig:
    rows: int = 32
    cols: int = 32
    element_size: float = 1e-3
    poisson_ratio: float = 0.45

    def build(self) -> MeshModel:
        return MeshModel(self.rows, self.cols, self.element_size, self.poisson_ratio)


@dataclass
class NoiseConfig:
    snr_db: float = 35.0
    force_snr_db: float = 40.0


@dataclass
class PhantomConfig:
    count: int = 64
    held_out: int = 20
    lesion_count: tuple[int, int] = (1, 3)
    center_range: tuple[float, float] = (0.15, 0.85)
    axis_range: tuple[float, float] = (0.08, 0.22)
    background_range: tuple[float, float] = (0.1, 0.15)
    lesion_range: tuple[float, float] = (0.3, 0.8)

    def spec(self, mesh: MeshConfig, seed: int) -> PhantomSpec:
        return PhantomSpec(rows=mesh.rows, cols=mesh.cols, lesion_count=tuple(self.lesion_count),
                           center_range=tuple(self.center_range), axis_range=tuple(self.axis_range),
                           background_range=tuple(self.background_range),
                           lesion_range=tuple(self.lesion_range), seed=seed)


@dataclass
class RunConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    load: LoadSpec = field(default_factory=LoadSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    seed: int = 0
    output_dir: str = "run"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recon"]["lambda"] = d["recon"].pop("lam")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_RENAMES = {"recon": {"lambda": "lam"}}


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    renames = _RENAMES.get(section, {})
    kwargs = {}
    for key, value in data.items():
        name = renames.get(key, key)
        if name not in known or key in renames.values():
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section or 'top-level'} config: {exc}") from exc


_SECTIONS = {"mesh": MeshConfig, "load": LoadSpec, "noise": NoiseConfig, "phantom": PhantomConfig,
             "train": TrainConfig, "recon": ReconConfig}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key in ("seed", "output_dir"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown key {key}")
    cfg = RunConfig(**kwargs)
    if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)
