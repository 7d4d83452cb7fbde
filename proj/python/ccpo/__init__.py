"""Python bindings for the ccpo C++ core.

Configuration uses the same keys as the config files and ``ccpo --set``::

    cfg = ccpo.Config({"method": "ccpo", "iterations": 200, "seed": 3})
    train, cal, test = ccpo.Corpus.from_config(cfg).split(cfg.calibration_size, cfg.test_size)
    result = ccpo.train(cfg, train, cal)
    ccpo.evaluate(result, cfg, test)
"""

import json

from ._core import (
    Config,
    Corpus,
    NumericError,
    ParseError,
    TrainResult,
    UsageError,
    ValidationError,
    config_keys,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)


def iteration_logs(result):
    """Per-iteration training records as dicts."""
    return [json.loads(line) for line in result.log_lines]


__all__ = [
    "Config",
    "Corpus",
    "NumericError",
    "ParseError",
    "TrainResult",
    "UsageError",
    "ValidationError",
    "config_keys",
    "evaluate",
    "iteration_logs",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
