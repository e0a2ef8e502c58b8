"""Flat `key: value` experiment configs and the reproducibility manifest.

Config files are UTF-8, one `key: value` pair per line, `#` comments.
Architecture strings and attack budgets appear verbatim as values. The
manifest written by every CLI run carries the resolved config, the seed, and
library versions; re-running from a manifest reproduces the run bit for bit."""

from __future__ import annotations

import json
import os
import sys

import numpy as np

from . import __version__
from .errors import ContractError, FormatError, ParseError

MANIFEST_SCHEMA = "advlab-manifest/1"


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            if ":" not in stripped:
                raise ParseError(f"expected 'key: value', got {stripped!r}", offset)
            key, _, value = stripped.partition(":")
            key = key.strip()
            if not key:
                raise ParseError("empty config key", offset)
            out[key] = value.strip()
        offset += len(line)
    return out


def read_config(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def apply_overrides(config: dict[str, str], overrides) -> dict[str, str]:
    out = dict(config)
    for item in overrides or ():
        if "=" not in item:
            raise ContractError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


class Config:
    """Typed access over the flat string map."""

    def __init__(self, values: dict[str, str]):
        self.values = dict(values)

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.values.get(key, default)

    def require(self, key: str) -> str:
        if key not in self.values:
            raise ContractError(f"config key '{key}' is required")
        return self.values[key]

    def get_int(self, key: str, default: int | None = None) -> int | None:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return int(float(raw))
        except ValueError:
            raise ContractError(f"config key '{key}' must be an integer, got {raw!r}") from None

    def get_float(self, key: str, default: float | None = None) -> float | None:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ContractError(f"config key '{key}' must be a number, got {raw!r}") from None

    def get_bool(self, key: str, default: bool = False) -> bool:
        raw = self.values.get(key)
        if raw is None:
            return default
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"config key '{key}' must be boolean, got {raw!r}")

    def get_floats(self, key: str, default=None):
        raw = self.values.get(key)
        if raw is None:
            return default
        return [float(v) for v in raw.split(",") if v.strip()]


def write_manifest(directory, subcommand: str, config: dict[str, str], seed: int) -> str:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "subcommand": subcommand,
        "config": dict(sorted(config.items())),
        "seed": int(seed),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "advlab": __version__,
        },
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise FormatError(f"{path}: unknown manifest schema {doc.get('schema')!r}")
    return doc
