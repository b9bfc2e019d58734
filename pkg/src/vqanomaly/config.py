"""Run configuration: YAML file < environment (VQAD_*) < command-line overrides.

Nested keys use dots on the command line (``network.levels=3``) and double
underscores in the environment (``VQAD_NETWORK__LEVELS=3``). Values are parsed
as YAML scalars, so ``1e-4``, ``true`` and ``null`` work as expected.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping

import yaml

ENV_PREFIX = "VQAD_"


class OverrideError(ValueError):
    pass


def parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise OverrideError(f"cannot set {dotted!r}: {k!r} is not a section")
        node = nxt
    node[keys[-1]] = value


def env_overrides(environ: Mapping[str, str] | None = None, prefix: str = ENV_PREFIX) -> dict[str, object]:
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(prefix) and len(k) > len(prefix):
            out[k[len(prefix):].lower().replace("__", ".")] = parse_value(v)
    return out


def load_layered(path: str | Path | None, overrides: list[str] | None = None,
                 environ: Mapping[str, str] | None = None) -> dict:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise OverrideError(f"{path}: top level must be a mapping")
    for key, value in env_overrides(environ).items():
        set_path(data, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise OverrideError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_path(data, key.strip(), parse_value(value))
    return data
