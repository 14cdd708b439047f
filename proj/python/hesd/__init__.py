"""Hessian eigenspectrum diagnostics for generalization.

Thin wrappers over the compiled core. Reports and verdicts use the same JSON
schema as the ``hesd`` command-line tool.
"""

import json
from os import PathLike
from typing import Any, Optional, Union

from . import _core
from ._core import ConfigError, FormatError, HesdType, NumericalError, SCHEMA_VERSION, classify, slq

__all__ = [
    "ConfigError",
    "FormatError",
    "HesdType",
    "NumericalError",
    "SCHEMA_VERSION",
    "analyze",
    "assess",
    "classify",
    "config_hash",
    "normalize_config",
    "slq",
    "train",
]

Config = Union[str, dict]


def _config_text(config: Config) -> str:
    return config if isinstance(config, str) else json.dumps(config)


def normalize_config(config: Config) -> dict:
    """Validated config with every default filled in."""
    return json.loads(_core.normalize_config(_config_text(config)))


def config_hash(config: Config) -> str:
    return _core.config_hash(_config_text(config))


def train(config: Config, out_dir: Union[str, PathLike]) -> dict:
    """Trains and writes checkpoints, config.json and metrics.csv to ``out_dir``."""
    return json.loads(_core.train(_config_text(config), str(out_dir)))


def analyze(
    checkpoint: Union[str, PathLike],
    tag: str = "train",
    probes: Optional[int] = None,
    steps: Optional[int] = None,
    seed: Optional[int] = None,
    qs_baseline: Optional[float] = None,
) -> dict:
    """Criteria report for one checkpoint, with the density under ``density``."""
    return json.loads(_core.analyze(str(checkpoint), tag, probes, steps, seed, qs_baseline))


def assess(
    train_report: dict,
    generalization_report: dict,
    ct_threshold: float = -0.6,
    delta_re: float = 1.5,
    delta_kh05: float = 1.2,
) -> dict[str, Any]:
    return json.loads(
        _core.assess(
            json.dumps(train_report),
            json.dumps(generalization_report),
            ct_threshold,
            delta_re,
            delta_kh05,
        )
    )
