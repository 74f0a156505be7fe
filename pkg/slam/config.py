"""Process settings and scenario loading."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from slam.errors import ScenarioConfigError
from slam.linearization import Linearizer
from slam.schemas import ScenarioConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Settings loaded from SLAM_* environment variables or .env."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="SLAM_",
        case_sensitive=True,
        extra="ignore",
    )

    SCENARIO_PATH: str = "rules/scenario.yaml"
    OUT_DIR: str = "runs"
    LOGS_DIR: str = "logs"
    LOG_LEVEL: str = "INFO"
    WORKERS: int = 1

    # Wall-clock columns are zeroed when off, so reruns are byte-identical
    RECORD_TIMING: bool = True
    # JSONL run events under LOGS_DIR/metrics/
    METRICS_ENABLED: bool = False


def get_settings() -> Settings:
    """Fresh settings instance (reads the environment on every call)."""
    return Settings()


def _error_path(err: dict) -> str:
    return ".".join(str(part) for part in err.get("loc", ())) or "<root>"


def validate_scenario(data: dict[str, Any], source: str = "<dict>") -> ScenarioConfig:
    """Validate a parsed scenario mapping.

    Raises:
        ScenarioConfigError: message names the first offending key path.
    """
    if not isinstance(data, dict):
        raise ScenarioConfigError(f"{source}: top level must be a mapping, got {type(data).__name__}")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = _error_path(first)
        raise ScenarioConfigError(f"{source}: invalid key '{key}': {first['msg']}") from e


def load_scenario(path: str | Path | None = None) -> ScenarioConfig:
    """Load and validate a scenario YAML file.

    Args:
        path: Scenario file; defaults to Settings.SCENARIO_PATH.

    Raises:
        ScenarioConfigError: unreadable file, bad YAML or schema violation.
    """
    path = Path(path or get_settings().SCENARIO_PATH)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioConfigError(f"cannot read scenario {path}: {e}") from e
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ScenarioConfigError(f"{path}: invalid YAML: {e}") from e

    scenario = validate_scenario(data, str(path))
    logger.debug(f"Loaded scenario {path} (version={scenario.version}, seed={scenario.seed})")
    return scenario


def apply_overrides(
    scenario: ScenarioConfig,
    seed: int | None = None,
    gamma: int | None = None,
    linearizer: Linearizer | str | None = None,
) -> ScenarioConfig:
    """Return a copy with CLI overrides applied and re-validated."""
    data = scenario.model_dump(mode="json")
    if seed is not None:
        data["seed"] = seed
    if gamma is not None:
        data["filter"]["gamma"] = gamma
    if linearizer is not None:
        data["filter"]["linearizer"] = Linearizer(linearizer).value
    return validate_scenario(data, "<overrides>")
