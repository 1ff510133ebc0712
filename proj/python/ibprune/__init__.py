"""Two-stage static and dynamic pruning for a small transformer encoder."""

import json

from . import _core
from ._core import (
    Checkpoint,
    ConfigError,
    ContractError,
    FormatError,
    KeepRateCollapse,
    entropy_loss,
    fixed_lengths,
    hc_open_probability,
    skim_loss,
)

__all__ = [
    "Checkpoint",
    "ConfigError",
    "ContractError",
    "FormatError",
    "KeepRateCollapse",
    "default_config",
    "normalize_config",
    "load_dataset",
    "synth_generate",
    "synth_label",
    "finetune_teacher",
    "stage1",
    "stage2",
    "evaluate",
    "model_flops",
    "entropy_loss",
    "skim_loss",
    "hc_open_probability",
    "fixed_lengths",
]


def _dump(config):
    return "" if config is None else json.dumps(config)


def default_config():
    """Desk-scale RunConfig as a dict."""
    return json.loads(_core.default_config_json())


def normalize_config(config):
    """Fill defaults into a (partial) RunConfig dict and validate it."""
    return json.loads(_core.normalize_config_json(_dump(config)))


def load_dataset(config=None):
    """(train, validation, test) lists of (ids, label) for a RunConfig."""
    return _core.load_dataset(_dump(config))


def synth_generate(synthetic, count, seed=42):
    return _core.synth_generate(json.dumps(synthetic), count, seed)


def synth_label(synthetic, ids):
    return _core.synth_label(json.dumps(synthetic), list(ids))


def finetune_teacher(config, train, validation):
    """Returns (checkpoint, metrics CSV text)."""
    return _core.finetune_teacher(_dump(config), train, validation)


def stage1(config, train, validation, teacher):
    """Returns (checkpoint, metrics CSV text, converged, report)."""
    return _core.stage1(_dump(config), train, validation, teacher)


def stage2(config, train, validation, start):
    """Returns (checkpoint, metrics CSV text)."""
    return _core.stage2(_dump(config), train, validation, start)


def evaluate(checkpoint, examples, padding="batch", dataset_name="", batch_size=32, metric="accuracy"):
    return json.loads(checkpoint.evaluate(examples, padding, dataset_name, batch_size, metric))


def model_flops(checkpoint, trace_lines, padding="batch", dataset_name="", batch_size=32):
    return json.loads(_core.model_flops(checkpoint, list(trace_lines), padding, dataset_name, batch_size))
