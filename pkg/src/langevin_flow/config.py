"""
YAML settings: packaged defaults, user overrides and config hashing.
"""

import copy
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).parent
MODEL_SETTINGS = 'model_settings.yaml'
LORENZ_SETTINGS = 'lorenz_settings.yaml'


def load_config(config_path: Union[str, Path], section: Optional[str] = None) -> Dict[str, Any]:
    """
    Load a YAML settings file.

    Relative paths that do not exist in the working directory are resolved
    next to this module, so the packaged settings load by bare name.

    Args:
        config_path: Path to the YAML file
        section: Optional top-level key to return instead of the whole file

    Returns:
        Configuration dictionary

    Raises:
        FileNotFoundError: If the file cannot be found
        ConfigurationError: If ``section`` is missing
    """
    path = Path(config_path)
    if not path.is_absolute() and not path.exists():
        path = PACKAGE_DIR / path
    if not path.exists():
        raise FileNotFoundError(
            f"Configuration file not found: {config_path}\n"
            f"Packaged settings live in {PACKAGE_DIR}."
        )
    with open(path, 'r') as f:
        config = yaml.safe_load(f) or {}
    logger.info(f"Loaded configuration from: {path}")
    if section is None:
        return config
    if section not in config:
        raise ConfigurationError(f"Section '{section}' not found in {path}. Available: {list(config)}")
    return config[section]


def merge(base: Dict[str, Any], override: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """Recursively overlay ``override`` on a copy of ``base``; None values are ignored."""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve(defaults_file: str, user_path: Optional[Union[str, Path]] = None,
            overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Apply the precedence flags > user file > packaged defaults.

    Returns:
        The fully materialized configuration dictionary
    """
    config = load_config(defaults_file)
    if user_path is not None:
        config = merge(config, load_config(user_path))
    return merge(config, overrides)


def dump_yaml(data: Dict[str, Any]) -> str:
    """Canonical YAML text (sorted keys) used for manifests and hashing."""
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False)


def config_hash(data: Dict[str, Any]) -> bytes:
    """SHA-256 digest of the canonical YAML dump."""
    return hashlib.sha256(dump_yaml(data).encode('utf-8')).digest()
