"""Run configuration: a flat key-value file maps 1:1 onto TrainConfig.

File format: one ``key = value`` per line, ``#`` comments allowed, keys
exactly the TrainConfig field names (the objective weight ``lambda`` is
stored as ``lambda_`` in Python because of the keyword).  Unknown keys
are rejected.  The config hash pins a checkpoint to the configuration
that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .synth import WorldSpec

_KEY_ALIASES = {"lambda": "lambda_"}


@dataclass
class TrainConfig:
    # objective weights and temperatures
    lambda_: float = 0.5
    beta: float = 0.5
    tau1: float = 0.07
    tau2: float = 0.10
    # optimizer (full-scale reference rate is 4e-4; desk default is higher)
    learning_rate: float = 1e-3
    weight_decay: float = 5e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0  # 0 disables clipping
    # schedule
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    # encoders
    image_side: int = 32
    embed_patch: int = 8
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    # pathology queries and covariance patches
    n_query: int = 4
    vpoe_layers: int = 2
    patch_size: int = 8
    l2_normalize: bool = True
    cce_full_matrix: bool = False
    # synthetic data
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    data_seed: int = 20_000_000
    noise_sigma: float = 0.05

    def __post_init__(self):
        for name in ("tau1", "tau2", "learning_rate", "batch_size", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_", "beta", "weight_decay", "clip_norm", "patience", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        if self.image_side % self.patch_size != 0:
            raise ConfigError("image_side must be divisible by patch_size")

    def world(self) -> WorldSpec:
        return WorldSpec(image_side=self.image_side, noise_sigma=self.noise_sigma)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _public_key(field_name: str) -> str:
    for alias, target in _KEY_ALIASES.items():
        if target == field_name:
            return alias
    return field_name


def config_to_text(cfg: TrainConfig) -> str:
    lines = [f"{_public_key(f.name)} = {_format_value(getattr(cfg, f.name))}"
             for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: TrainConfig) -> bytes:
    canon = "\n".join(sorted(config_to_text(cfg).splitlines()))
    return hashlib.sha256(canon.encode()).digest()


def _parse_value(raw: str, typ) -> object:
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"expected an integer, got {raw!r}") from e
    try:
        return float(raw)
    except ValueError as e:
        raise ConfigError(f"expected a number, got {raw!r}") from e


def parse_config_text(text: str) -> TrainConfig:
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    # dataclass field types may arrive as strings under future annotations
    real_types = {"float": float, "int": int, "bool": bool}
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        field_name = _KEY_ALIASES.get(key, key)
        if field_name not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if field_name in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        typ = types[field_name]
        if isinstance(typ, str):
            typ = real_types.get(typ, float)
        values[field_name] = _parse_value(raw, typ)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def save_config(path, cfg: TrainConfig) -> None:
    Path(path).write_text(config_to_text(cfg))
