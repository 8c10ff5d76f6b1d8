"""Service configuration: JSON file, environment overrides, then flags.

Precedence (lowest to highest): built-in defaults, config file, ``EMAHUB_*``
environment variables, explicit overrides from command-line flags.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

ENV_CONFIG = "EMAHUB_CONFIG"

_ENV_KEYS = {
    "EMAHUB_BIND": "bind",
    "EMAHUB_DATA_DIR": "data_dir",
    "EMAHUB_KEYSTORE": "keystore_path",
    "EMAHUB_SURVEYS_DIR": "surveys_dir",
    "EMAHUB_RULES": "rules_path",
    "EMAHUB_RATE_PER_HOUR": "rate_per_hour",
}

_FILE_KEYS = {
    "bind": "bind",
    "dataDir": "data_dir",
    "keystorePath": "keystore_path",
    "surveysDir": "surveys_dir",
    "rulesPath": "rules_path",
    "ratePerHour": "rate_per_hour",
}


class ConfigError(Exception):
    pass


@dataclass
class ServiceConfig:
    bind: str = "127.0.0.1:8080"
    data_dir: Path = field(default_factory=lambda: Path("data"))
    keystore_path: Path | None = None
    surveys_dir: Path | None = None
    rules_path: Path | None = None
    rate_per_hour: int = 60

    def resolved_keystore(self) -> Path:
        return self.keystore_path or self.data_dir / "keys.json"

    def resolved_surveys_dir(self) -> Path:
        return self.surveys_dir or self.data_dir / "surveys"

    def resolved_rules(self) -> Path | None:
        if self.rules_path is not None:
            return self.rules_path
        candidate = self.data_dir / "rules.json"
        return candidate if candidate.exists() else None

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.bind.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"bind must look like host:port, got {self.bind!r}")
        return host, int(port)


def load_config(path: Path | str | None = None,
                env: Mapping[str, str] | None = None,
                **overrides: Any) -> ServiceConfig:
    env = os.environ if env is None else env
    values: dict[str, Any] = {}

    file_path = Path(path) if path else (
        Path(env[ENV_CONFIG]) if env.get(ENV_CONFIG) else None)
    if file_path is not None:
        try:
            doc = json.loads(Path(file_path).read_text("utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {file_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {file_path} is not valid JSON: {exc}") from exc
        unknown = set(doc) - set(_FILE_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, attr in _FILE_KEYS.items():
            if key in doc:
                values[attr] = doc[key]

    for env_key, attr in _ENV_KEYS.items():
        if env.get(env_key):
            values[attr] = env[env_key]

    for attr, value in overrides.items():
        if value is not None:
            values[attr] = value

    config = ServiceConfig()
    for attr, value in values.items():
        if attr in ("data_dir", "keystore_path", "surveys_dir", "rules_path"):
            value = Path(value)
        elif attr == "rate_per_hour":
            try:
                value = int(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"ratePerHour must be an integer: {value!r}") from exc
        setattr(config, attr, value)
    return config
