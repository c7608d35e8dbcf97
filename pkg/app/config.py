import logging
import os
from enum import Enum
from pathlib import Path
from typing import Dict, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from .errors import ConfigError
from .schemas import RunConfig

load_dotenv()

LOG_LEVEL = os.getenv("MSVIT_LOG_LEVEL", "INFO")
EFFECTIVE_CONFIG_NAME = "config.env"

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def read_config_file(path: Path) -> Dict[str, str]:
    """Parse flat `key = value` lines; `#` starts a comment"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    values = dotenv_values(path)
    empty = [key for key, value in values.items() if value is None or value == ""]
    if empty:
        raise ConfigError(f"config keys without a value in {path}: {empty}")
    return {key.strip().lower(): value for key, value in values.items()}


def parse_overrides(pairs) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        overrides[key.strip().lower()] = value.strip()
    return overrides


def build_run_config(
    path: Optional[Path] = None, overrides: Optional[Dict[str, object]] = None
) -> RunConfig:
    values: Dict[str, object] = {}
    if path is not None:
        values.update(read_config_file(path))
    values.update(overrides or {})

    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"invalid config ({where}): {first['msg']}") from e


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    return repr(value) if isinstance(value, float) else str(value)


def write_config(cfg: RunConfig, directory: Path) -> Path:
    """Write the effective config so it can be reloaded with build_run_config"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / EFFECTIVE_CONFIG_NAME
    lines = ["# effective configuration (defaults applied)"]
    for name in RunConfig.model_fields:
        lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote effective config to {path}")
    return path
