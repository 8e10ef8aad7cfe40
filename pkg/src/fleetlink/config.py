"""Runtime configuration for cloud and harness processes.

Loaded from a JSON file named by ``--config`` or the FLEET_CONFIG env var;
unset keys fall back to the defaults below. FLEET_MODULE_ROOT overrides
``module_root`` regardless of the file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError


@dataclass
class FleetConfig:
    client_port: int = 9100
    gateway_port: int = 9200
    module_root: str = "./modules"
    ack_timeout_ms: int = 5000
    iteration_timeout_ms: int = 10000
    heartbeat_ms: int = 2000
    fault_injection: bool = False
    ui_root: str | None = None


def load_config(path: str | os.PathLike | None = None) -> FleetConfig:
    path = path or os.environ.get("FLEET_CONFIG")
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValidationError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"config file {path} must hold a JSON object")
    known = {f.name for f in fields(FleetConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    config = FleetConfig(**data)
    env_root = os.environ.get("FLEET_MODULE_ROOT")
    if env_root:
        config.module_root = env_root
    return config
