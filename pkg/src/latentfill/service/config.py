"""Service configuration: JSON file plus environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from ..errors import InvalidInput

ENV_PREFIX = "LATENTFILL_"


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8350
    artifact_root: str = "artifacts"
    workers: int = 2
    backbone_preset: str = "small"
    backbone_seed: int = 0
    codec_factor: int = 8
    timesteps: int = 1000

    def __post_init__(self):
        if self.workers < 1:
            raise InvalidInput("workers must be >= 1")


_INT_KEYS = {"port", "workers", "backbone_seed", "codec_factor", "timesteps"}


def load_config(path: str | None = None, env: dict | None = None) -> ServiceConfig:
    """Build config from defaults, then a JSON file, then LATENTFILL_* env vars."""
    values: dict = {}
    if path is not None:
        with open(path) as f:
            file_values = json.load(f)
        unknown = set(file_values) - set(ServiceConfig.__dataclass_fields__)
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    env = os.environ if env is None else env
    for key in ServiceConfig.__dataclass_fields__:
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            values[key] = env[env_key]
    for key in _INT_KEYS:
        if key in values:
            values[key] = int(values[key])
    return ServiceConfig(**values)
