"""Sectioned ``key = value`` run configuration files.

    [data]
    synthetic = tile-separable
    count = 2000
    shape = 32x32
    classes = 4

    [model]
    model = vgg9
    width = 8

    [decomposition]
    grid = 2x2

    [train]
    pipeline = cnn-dnn-transfer
    epochs_local = 30
    epochs_global = 10
    epochs_baseline = 40

Blank lines and lines starting with ``#`` or ``;`` are ignored.  Unknown
sections or keys, malformed values and a missing ``pipeline`` are reported
with their line number.
"""

from __future__ import annotations

import dataclasses
import re
from pathlib import Path

from .decomposition import format_grid, parse_grid
from .errors import ConfigError
from .pipelines import RunConfig


def _extents(text: str) -> tuple:
    return tuple(parse_grid(text))


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_int(text: str):
    return None if text.lower() in ("auto", "none") else int(text)


def _opt_str(text: str):
    return None if text.lower() == "none" else text


# section -> key -> (RunConfig field, parser)
SCHEMA = {
    "data": {
        "train": ("train", _opt_str),
        "val": ("val", _opt_str),
        "val_ratio": ("val_ratio", float),
        "synthetic": ("synthetic", _opt_str),
        "count": ("count", int),
        "shape": ("shape", _extents),
        "classes": ("classes", int),
        "channels": ("channels", int),
    },
    "model": {
        "model": ("model", str),
        "width": ("width", int),
        "head": ("head", str),
    },
    "decomposition": {
        "grid": ("grid", _extents),
        "delta": ("delta", int),
    },
    "train": {
        "pipeline": ("pipeline", str),
        "epochs_local": ("epochs_local", int),
        "epochs_global": ("epochs_global", int),
        "epochs_baseline": ("epochs_baseline", int),
        "fair_budget": ("fair_budget", _bool),
        "batch_size": ("batch_size", int),
        "lr": ("lr", float),
        "seed": ("seed", int),
        "workers": ("workers", int),
    },
    "lda": {
        "d": ("d", _opt_int),
        "gamma": ("gamma", float),
    },
}


def parse_config(source, overrides: dict | None = None) -> RunConfig:
    """Parse config text (or a path to a config file) into a validated RunConfig.

    `overrides` replaces RunConfig fields after parsing (used for CLI flags).
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                     and "=" not in source and Path(source).exists()):
        text = Path(source).read_text()
    else:
        text = str(source)
    values: dict = {}
    where: dict = {}
    section = None
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        name, conv = SCHEMA[section][key]
        if name in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            values[name] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
        where[name] = lineno
    if "pipeline" not in values:
        raise ConfigError("missing required key 'pipeline' in [train]", len(lines) + 1)
    values.update(overrides or {})
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        line = next((n for name, n in where.items() if re.search(rf"\b{name}\b", str(exc))), None)
        raise ConfigError(str(exc), line) from None


def serialize_config(cfg: RunConfig) -> str:
    """Config text that parses back to an equal RunConfig."""
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key, (name, _) in keys.items():
            value = getattr(cfg, name)
            if value is None:
                text = "none"
            elif name in ("shape", "grid"):
                text = format_grid(value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            out.append(f"{key} = {text}")
        out.append("")
    return "\n".join(out)


def config_fields() -> list[str]:
    return [f.name for f in dataclasses.fields(RunConfig)]
