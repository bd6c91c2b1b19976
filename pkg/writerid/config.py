"""
Configuration for the writer identification toolkit.
Handles ambient settings, logging and declarative run configs.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import structlog
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .core.errors import ConfigError
from .core.preprocess import AugmentParams
from .core.splits import Protocol
from .models.pipeline import ModelConfig
from .services.trainer import TrainConfig

logger = structlog.get_logger()


class Settings(BaseSettings):
    """Application settings with environment variable support."""

    model_config = SettingsConfigDict(env_prefix="WID_", env_file=".env", case_sensitive=False, extra="ignore")

    data_root: Optional[Path] = None
    output_root: Path = Path("runs")
    environment: str = "development"
    log_level: str = "INFO"
    device: str = "cpu"
    num_workers: int = 0


# Global settings instance
settings = Settings()


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    manifest: Optional[Path] = None
    split: Optional[Path] = None
    output_dir: Optional[Path] = None


class ProtocolConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Protocol = Protocol.LINE_LEVEL
    min_pages: int = Field(default=3, ge=3)
    split_seed: int = 0


class RunConfig(BaseModel):
    """Everything a run needs; validated before any side effect."""

    model_config = ConfigDict(extra="forbid")

    paths: PathsConfig = Field(default_factory=PathsConfig)
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    augment: AugmentParams = Field(default_factory=AugmentParams)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)


def flatten_keys(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested sections and dotted keys → one flat dotted-key mapping."""
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping) and value:
            flat.update(flatten_keys(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def nest_keys(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for dotted, value in flat.items():
        node = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config key '{dotted}' conflicts with a value at '{part}'")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"config key '{dotted}' conflicts with section '{parts[-1]}'")
        node[parts[-1]] = value
    return nested


def build_run_config(*sources: Optional[Mapping[str, Any]]) -> RunConfig:
    """Merge sources left to right (later wins) and validate."""
    merged: Dict[str, Any] = {}
    for source in sources:
        if source:
            merged.update(flatten_keys(source))
    try:
        return RunConfig(**nest_keys(merged))
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid run config: {problems}")


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a YAML run config (nested or dotted keys) and apply command-line overrides."""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    config = build_run_config(data, overrides)
    logger.debug("run_config_loaded", path=str(path) if path else None)
    return config


# Logging configuration
def setup_logging():
    """Configure structured logging to stderr."""
    logging.basicConfig(format="%(message)s", stream=sys.stderr, level=settings.log_level.upper())
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer() if settings.environment == "production"
            else structlog.dev.ConsoleRenderer()
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )
