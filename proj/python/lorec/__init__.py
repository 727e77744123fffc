"""Python access to the recommender poisoning defense pipeline."""

import json
from pathlib import Path

from . import _core
from ._core import ConfigError, DataError, compensate_rounds, consistency, fraud_delta_closed_form, initial_weights, target_metrics

__all__ = [
    "ConfigError",
    "DataError",
    "compensate_rounds",
    "config_digest",
    "consistency",
    "fraud_delta_closed_form",
    "initial_weights",
    "load_config",
    "normalize_config",
    "run",
    "target_metrics",
]


def normalize_config(config: dict) -> dict:
    return json.loads(_core.normalize_config(json.dumps(config)))


def load_config(path) -> dict:
    return json.loads(_core.load_config(str(Path(path))))


def config_digest(config: dict) -> str:
    return _core.config_digest(json.dumps(config))


def run(config: dict, out=None) -> dict:
    """Run the pipeline and return the report; artifacts are written under `out` if given."""
    return json.loads(_core.run(json.dumps(config), "" if out is None else str(out)))
