"""Global label inference for locally labelled few-shot tasks."""

import json

from ._mela import (
    Config,
    ContractError,
    NumericalError,
    ValidationError,
    __version__,
    clustering_accuracy,
    config_keys,
    kmeans,
    logreg_fit,
    prune_threshold,
    ridge_fit,
    verify_bound,
)
from . import _mela

__all__ = [
    "Config",
    "ContractError",
    "NumericalError",
    "ValidationError",
    "__version__",
    "clustering_accuracy",
    "compare",
    "config_keys",
    "kmeans",
    "logreg_fit",
    "prune_threshold",
    "ridge_fit",
    "sweep",
    "verify_bound",
]


def compare(config, variants=("initial", "mela")):
    """One report dict per variant, all run on the same world and tasks."""
    return json.loads(_mela.compare_json(config, list(variants)))


def sweep(config, param, values, shots=1):
    """CSV text with one row per value of `param` ("q" or "separation")."""
    return _mela.sweep_csv(config, param, [float(v) for v in values], shots)
