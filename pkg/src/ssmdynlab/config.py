"""Typed INI configuration for the command-line runner.

One section per subcommand, flat key-value pairs inside. Every key is
declared in SCHEMAS with a type and a default; anything else is rejected
by name so typos fail loudly instead of silently running the defaults.
Command-line overrides (``--set key=value``) are parsed with the same
schema and win over file values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass


class ConfigError(ValueError):
    """Raised for malformed files, unknown keys, or unparseable values."""


@dataclass(frozen=True)
class Field:
    kind: str      # int | float | bool | str | int_list | float_list | str_list
    default: object


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


SCHEMAS: dict[str, dict[str, Field]] = {
    "lyapunov": {
        "draws": Field("int", 1000),
        "dims": Field("int_list", (1, 4, 16)),
        "t_lens": Field("int_list", (64, 512)),
        "contracting": Field("bool", False),
    },
    "divergence": {
        "d": Field("int", 8),
        "t_len": Field("int", 256),
        # the larger epsilon keeps the probe visible on the BF16/FP16 grids
        "epsilons": Field("float_list", (1e-4, 1e-2)),
        "policies": Field("str_list", ("fp64", "bf16", "fp16")),
        "draws": Field("int", 25),
        "perturb": Field("str", "both"),
    },
    "scan-bench": {
        "d": Field("int", 16),
        "t_lens": Field("int_list", (1, 64, 1024, 4096)),
        "chunk": Field("int", 64),
        "worker_counts": Field("int_list", (1, 2, 4)),
        "repeats": Field("int", 3),
    },
    "train": {
        "task": Field("str", "copy"),
        "preset": Field("str", ""),
        "d": Field("int", 64),
        "t_len": Field("int", 64),
        "vocab": Field("int", 16),
        "mode": Field("str", "input_projected"),
        "t_max": Field("int", 64),
        "gated": Field("bool", True),
        "steps": Field("int", 500),
        "batch_size": Field("int", 8),
        "learning_rate": Field("float", 1e-3),
        "warmup_steps": Field("int", 0),
        "clip_norm": Field("float", 1.0),
        "loss_scale": Field("float", 1.0),
        "epochs": Field("int", 1),
        "policy": Field("str", "fp32"),
        "lora_rank": Field("int", 0),   # 0 trains the full model
        "lora_strategy": Field("str", "sll"),
        "lora_scale": Field("float", 1.0),
        "n_sequences": Field("int", 512),
        "eval_sequences": Field("int", 128),
        "marks": Field("int", 1),
        "corpus": Field("str", ""),
        "compare": Field("bool", False),
    },
    "lora-verify": {
        "checkpoint": Field("str", ""),
        "role": Field("str", "fused_buffer"),
        "segment_width": Field("int", 0),   # 0 derives width from the base matrix
    },
    "report": {
        "run_dir": Field("str", ""),   # empty renders into the output dir itself
        "dpi": Field("int", 120),
    },
}


def _parse_scalar(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"invalid {kind} for config key '{key}': {raw!r}") from None
    raise AssertionError(f"unhandled kind {kind}")


def parse_value(kind: str, raw: str, key: str):
    """Convert one raw string to the schema type, naming the key on failure."""
    if kind.endswith("_list"):
        base = kind[:-5]
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        if not parts:
            raise ConfigError(f"empty list for config key '{key}'")
        return tuple(_parse_scalar(base, p, key) for p in parts)
    return _parse_scalar(kind, raw, key)


def _apply(values: dict, schema: dict[str, Field], key: str, raw: str, subcommand: str):
    if key not in schema:
        raise ConfigError(f"unknown config key '{key}' for subcommand '{subcommand}'")
    values[key] = parse_value(schema[key].kind, raw, key)


def load_config(subcommand: str, config_path=None, overrides=()) -> dict:
    """Resolve the configuration for one subcommand.

    Precedence, lowest to highest: schema defaults, the subcommand's file
    section, then ``key=value`` override strings. Sections whose names are
    not subcommands are rejected; keys are checked only against the active
    subcommand's schema, so one file can hold sections for several runs.
    """
    if subcommand not in SCHEMAS:
        raise ConfigError(f"unknown subcommand '{subcommand}'")
    schema = SCHEMAS[subcommand]
    values = {key: field.default for key, field in schema.items()}

    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"unreadable config file '{config_path}': {exc}") from exc
        except configparser.Error as exc:
            msg = str(exc).replace("\n", " ")
            raise ConfigError(f"malformed config file '{config_path}': {msg}") from exc
        for section in parser.sections():
            if section not in SCHEMAS:
                raise ConfigError(f"unknown config section '{section}'")
        if parser.has_section(subcommand):
            for key, raw in parser.items(subcommand):
                _apply(values, schema, key, raw, subcommand)

    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        _apply(values, schema, key.strip(), raw, subcommand)

    return values
