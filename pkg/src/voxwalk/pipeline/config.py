"""Flat ``key = value`` run configuration shared by every pipeline stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..molgraph import ELEMENTS
from ..voxelizer import GridSpec
from ..wjs import SamplerParams


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # grid
    preset: str = "desk"
    edge_length: int = 32
    spacing: float = 0.25
    atom_radius: float = 0.25
    channels: tuple = ELEMENTS
    # toy data
    dataset_count: int = 500
    dataset_min_heavy: int = 3
    dataset_max_heavy: int = 12
    dataset_max_radius: float = 3.0
    # vq-vae
    n_codes: int = 256
    code_dim: int = 256
    vq_widths: tuple = (32, 64)
    vq_heads: int = 1
    beta: float = 0.25
    vq_lr: float = 1e-3
    vq_epochs: int = 30
    vq_batch_size: int = 8
    vq_micro_batch: int = 8
    vq_subsample: float = 0.8
    vq_use_ema: bool = False
    max_translation: float = 0.25
    # denoiser
    sigma: float = 1.8
    dae_widths: tuple = (32, 64)
    dae_heads: int = 1
    dae_dropout: float = 0.1
    dae_lr: float = 1e-3
    dae_epochs: int = 30
    dae_batch_size: int = 8
    dae_subsample: float = 0.2
    dae_use_ema: bool = False
    # shared optimiser settings
    weight_decay: float = 1e-2
    ema_decay: float = 0.999
    # sampler
    gamma: float = 1.0
    inverse_mass: float = 1.0
    step_size: float = 0.25
    peak_threshold: float = 0.3
    # run
    master_seed: int = 0
    dtype: str = "float64"
    work_dir: str = "run"
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.preset not in ("desk", "paper-shape"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("vq_subsample", "dae_subsample"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        self.channels = tuple(self.channels)
        self.vq_widths = tuple(int(w) for w in self.vq_widths)
        self.dae_widths = tuple(int(w) for w in self.dae_widths)

    # -- derived --------------------------------------------------------------

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(self.edge_length, self.spacing, self.channels, self.atom_radius)

    @property
    def sampler(self) -> SamplerParams:
        return SamplerParams(self.gamma, self.inverse_mass, self.step_size, self.sigma)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def path(self, name: str) -> Path:
        return Path(self.work_dir) / name

    @property
    def dataset_path(self) -> Path:
        return self.path("dataset.jsonl")

    @property
    def vqvae_path(self) -> Path:
        return self.path("vqvae.tnnc")

    @property
    def dae_path(self) -> Path:
        return self.path("denoiser.tnnc")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "extra":
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def config_hash(self, keys=None) -> str:
        d = self.to_dict()
        d.pop("work_dir")
        if keys is not None:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    # -- text form ------------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Config":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds or key == "extra":
                raise ConfigError(f"line {n}: unknown key {key!r}")
            values[key] = _coerce(kinds[key], value, n)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.loads(path.read_text())

    def save(self, path):
        Path(path).write_text(self.dumps())


def _coerce(kind: str, value: str, line: int):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if kind == "tuple":
            items = [s.strip() for s in value.split(",") if s.strip()]
            return tuple(int(s) if s.lstrip("-").isdigit() else s for s in items)
        return value
    except ValueError:
        raise ConfigError(f"line {line}: cannot read {value!r} as {kind}") from None


def check_sigma(config: Config, checkpoint_sigma: float):
    if not np.isclose(config.sigma, checkpoint_sigma, rtol=1e-12, atol=0):
        raise ConfigError(f"config sigma {config.sigma} does not match the denoiser "
                          f"checkpoint's sigma {checkpoint_sigma}")
