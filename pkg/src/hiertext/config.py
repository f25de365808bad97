"""
Resolves run configuration: command-line flags override values from a
flat key=value config file, which override environment defaults and the
TrainConfig defaults.
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

from dotenv import dotenv_values

from .schemas import TrainConfig

logger = logging.getLogger(__name__)

METRIC_KEYS = {"average", "rloss_semantics"}
LIST_KEYS = {"level_hidden_sizes", "level_mlp_units"}
ENV_DEFAULTS = {"seed": "HIERTEXT_SEED"}


class ConfigError(ValueError):
    """
    Raised for unknown config keys or values outside their allowed set.
    """


@dataclass
class ResolvedConfig:
    """
    Validated training config plus the evaluation-only metric options.
    """
    train: TrainConfig
    average: str = "macro"
    rloss_semantics: str = "as_printed"


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def read_config_file(path: str) -> Dict[str, str]:
    """
    Parse a flat key=value file. Keys are case-insensitive and `-` and `_`
    are interchangeable.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    values = {}
    for key, value in dotenv_values(path).items():
        if value is None:
            raise ConfigError(f"config key {key!r} in {path} has no value")
        values[normalize_key(key)] = value
    logger.info("Read config file", extra={"path": str(path), "keys": sorted(values)})
    return values


def _coerce(key: str, value):
    if key in LIST_KEYS and isinstance(value, str):
        return [int(part) for part in value.split(",") if part.strip()]
    return value


def resolve_config(
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> ResolvedConfig:
    """
    Merge defaults, environment, config file and flag overrides (in that
    order of increasing precedence) and validate the result.

    Flag overrides that are None are treated as absent.
    """
    merged: Dict[str, object] = {}
    for key, env_name in ENV_DEFAULTS.items():
        if os.getenv(env_name) is not None:
            merged[key] = os.getenv(env_name)
    if config_path:
        merged.update(read_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[normalize_key(key)] = value

    unknown = set(merged) - set(TrainConfig.model_fields) - METRIC_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    try:
        train_values = {k: _coerce(k, v) for k, v in merged.items() if k not in METRIC_KEYS}
    except ValueError as exc:
        raise ConfigError(f"malformed per-level size list: {exc}") from exc
    resolved = ResolvedConfig(train=TrainConfig.model_validate(train_values))
    if "average" in merged:
        resolved.average = str(merged["average"])
    if "rloss_semantics" in merged:
        resolved.rloss_semantics = str(merged["rloss_semantics"])
    if resolved.average not in ("macro", "micro"):
        raise ConfigError(f"average must be macro or micro, got {resolved.average!r}")
    if resolved.rloss_semantics not in ("as_printed", "prose"):
        raise ConfigError(
            f"rloss_semantics must be as_printed or prose, got {resolved.rloss_semantics!r}"
        )
    return resolved
