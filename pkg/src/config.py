"""
Configuration - Runtime settings and the reproducible config file

Supports two layers:
1. Runtime settings from the environment (and a local .env file via python-dotenv):
   log level/format, metrics export, default config path.
2. The JSON configuration document (CliConfig) with net/train/data/eval sections.

Config file resolution priority:
1. Explicit path (the --config flag)
2. SMOKESEG_CONFIG environment variable
3. Built-in defaults (every field has one)
"""

import json
import logging
import os
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from src.models import CliConfig

logger = logging.getLogger("smokeseg")

load_dotenv()

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ConfigError(ValueError):
    """Raised when a configuration document cannot be read or fails validation."""


def format_validation_error(error: ValidationError) -> str:
    """Render every failing field as `loc: msg`, joined with '; '."""
    errors = []
    for err in error.errors():
        loc = ".".join(str(x) for x in err["loc"]) if err["loc"] else "input"
        errors.append(f"{loc}: {err['msg']}")
    return "; ".join(errors)


class RuntimeSettings:
    """Process-level settings read from the environment"""

    def __init__(self) -> None:
        self.log_level = self._load_choice("SMOKESEG_LOG_LEVEL", "INFO", LOG_LEVELS)
        self.log_format = self._load_choice("SMOKESEG_LOG_FORMAT", "text", ("text", "json"))
        self.metrics_console = os.getenv("SMOKESEG_METRICS_CONSOLE", "0").lower() in ("1", "true", "yes")
        config_path = os.getenv("SMOKESEG_CONFIG")
        self.config_path = Path(config_path) if config_path else None

    @staticmethod
    def _load_choice(env_var: str, default: str, choices: tuple[str, ...]) -> str:
        """
        Read an enumerated setting, falling back to the default on unknown values.

        Args:
            env_var: Environment variable name
            default: Value used when unset or invalid
            choices: Accepted values (compared case-insensitively)

        Returns:
            The normalized value
        """
        raw = os.getenv(env_var)
        if raw is None:
            return default
        normalized = raw.strip().upper() if default.isupper() else raw.strip().lower()
        if normalized not in choices:
            logger.warning(f"Ignoring {env_var}={raw!r}; expected one of {', '.join(choices)}")
            return default
        return normalized


def load_cli_config(path: Path | None = None) -> CliConfig:
    """
    Load and validate the JSON configuration document.

    Args:
        path: Config file; falls back to SMOKESEG_CONFIG, then defaults

    Returns:
        Validated CliConfig with every default filled in

    Raises:
        ConfigError: If the file is unreadable, not JSON, or fails validation (all fields listed)
    """
    path = path or settings.config_path
    if path is None:
        logger.info("No config file given; using built-in defaults")
        return CliConfig()

    try:
        document: Any = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e

    try:
        config = CliConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Config file {path} failed validation: {format_validation_error(e)}") from e

    logger.info(f"Loaded config from {path}")
    return config


def dump_config(model: BaseModel) -> str:
    """Serialize a resolved config (defaults included) for provenance echoes."""
    return model.model_dump_json(indent=2)


settings = RuntimeSettings()
