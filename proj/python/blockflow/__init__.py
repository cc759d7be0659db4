"""Python bindings for the blockflow pipeline.

Configs are plain dicts with the same layout as the CLI's JSON files.
"""

import json as _json

from . import _blockflow
from ._blockflow import (
    CONFIG_SCHEMA_VERSION,
    DimensionError,
    NumericalError,
    ValidationError,
    block_count,
    gene_mean_stats,
    mmd_rbf,
    wasserstein2,
)

__all__ = [
    "CONFIG_SCHEMA_VERSION",
    "DimensionError",
    "NumericalError",
    "ValidationError",
    "block_count",
    "default_config",
    "gene_mean_stats",
    "mmd_rbf",
    "normalize_config",
    "run",
    "wasserstein2",
]

STAGES = ("synth", "build_blocks", "train_vae", "train_fm", "generate", "transfer", "evaluate")


def default_config():
    return _json.loads(_blockflow.default_config())


def normalize_config(cfg):
    """Fill in defaults and validate. Raises ValidationError."""
    return _json.loads(_blockflow.normalize_config(_json.dumps(cfg)))


def run(stage, cfg):
    """Run one pipeline stage (e.g. "synth", "train_vae") with a config dict."""
    name = stage.replace("-", "_")
    if name not in STAGES:
        raise ValidationError(f"unknown stage '{stage}'")
    getattr(_blockflow, "run_" + name)(_json.dumps(cfg, default=str))
