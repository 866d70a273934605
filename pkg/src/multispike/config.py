"""Experiment configuration: JSON schema, defaults, cross-field checks.

This module only validates and normalizes; it never touches the filesystem
beyond reading the config file itself, so a bad config can be rejected
before any output path is created.
"""
from __future__ import annotations

import copy
import json

import jsonschema

from .errors import ConfigError

_KERNEL_FIELDS = {
    "a": {"type": "number", "exclusiveMinimum": 0},
    "b": {"type": "number", "exclusiveMinimum": 0},
    "delay": {"type": "number", "minimum": 0},
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["network", "data"],
    "properties": {
        "network": {
            "type": "object",
            "additionalProperties": False,
            "required": ["widths"],
            "properties": {
                "widths": {
                    "type": "array",
                    "minItems": 2,
                    "items": {"type": "integer", "minimum": 1},
                },
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "total_steps": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["sfa", "linear", "ssp"]},
                "readout": {"enum": ["spike_count_sum"]},
                "param_jitter": {"type": "boolean"},
            },
        },
        "synapse": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kernel_size": {"type": "integer", "minimum": 1},
                "trainable": {"type": "boolean"},
                "init_seed": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "beta1": {"type": "number", "minimum": 0,
                          "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0,
                          "exclusiveMaximum": 1},
                "eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {
                # "nmnist" is accepted as an alias for the raw 34x34 AER
                # sensor format and normalized to "aer"
                "source": {"enum": ["synthetic", "portable", "aer", "nmnist"]},
                "train_dir": {"type": "string"},
                "test_dir": {"type": "string"},
                "merge_polarity": {"type": "boolean"},
                "task": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["rate_pattern", "temporal_order"]},
                        "num_units": {"type": "integer", "minimum": 1},
                        "num_classes": {"type": "integer", "minimum": 2},
                        "duration_ms": {"type": "number",
                                        "exclusiveMinimum": 0},
                        "samples_per_class": {"type": "integer", "minimum": 1},
                        "test_samples_per_class": {"type": "integer",
                                                   "minimum": 1},
                        "rate_low": {"type": "number", "minimum": 0},
                        "rate_high": {"type": "number", "exclusiveMinimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "csv": {"type": "string"},
                "checkpoint": {"type": "string"},
                "timing": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS = {
    "network": {
        "dt": 1.0,
        "mode": "sfa",
        "readout": "spike_count_sum",
        "param_jitter": True,
    },
    "synapse": {"kernel_size": 8, "trainable": True, "init_seed": 0},
    "train": {"lr": 1e-3, "batch_size": 32, "epochs": 10, "seed": 0,
              "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "data": {"merge_polarity": True},
    "output": {"csv": "metrics.csv", "checkpoint": "model.ckpt",
               "timing": False},
}


def _merge_defaults(base: dict, user: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_defaults(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(doc) -> dict:
    """Schema-check ``doc``, fill defaults, run cross-field checks."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.path) or "<root>"
        raise ConfigError(f"config {where}: {err.message}")

    cfg = _merge_defaults(DEFAULTS, doc)
    if cfg["data"]["source"] == "nmnist":
        cfg["data"]["source"] = "aer"

    widths = cfg["network"]["widths"]
    if widths[-1] < 2:
        raise ConfigError("the final width is the class count; need at least 2")

    data = cfg["data"]
    if data["source"] == "synthetic":
        if "task" not in data:
            raise ConfigError("synthetic data source requires a data.task block")
        task = data["task"]
        n_units = task.get("num_units", 32)
        n_classes = task.get("num_classes", 4)
        if task["kind"] == "temporal_order":
            n_classes = task.get("num_classes", 2)
        if widths[0] != n_units:
            raise ConfigError(
                f"network.widths[0]={widths[0]} but the task emits "
                f"{n_units} units")
        if widths[-1] != n_classes:
            raise ConfigError(
                f"network.widths[-1]={widths[-1]} but the task has "
                f"{n_classes} classes")
    else:
        for key in ("train_dir", "test_dir"):
            if key not in data:
                raise ConfigError(f"data source {data['source']!r} requires "
                                  f"data.{key}")
        if "task" in data:
            raise ConfigError("data.task only applies to the synthetic source")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(doc)


def apply_seed_override(cfg: dict, seed: int) -> dict:
    """Rewire both run seeds from one number, keeping them distinct."""
    out = copy.deepcopy(cfg)
    out["train"]["seed"] = seed
    out["synapse"]["init_seed"] = seed + 1000
    return out
