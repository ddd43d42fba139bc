"""Strict flat-JSON loading for the config dataclasses."""

from __future__ import annotations

import dataclasses
import json

from nhac.errors import InvalidConfigError


def from_mapping(cls, data: dict):
    """Build ``cls`` from a flat mapping; unknown keys and wrongly typed values are rejected."""
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{cls.__name__} config must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, val in data.items():
        default = known[key].default
        if isinstance(default, bool):
            if not isinstance(val, bool):
                raise InvalidConfigError(f"{key} must be true or false")
        elif isinstance(default, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise InvalidConfigError(f"{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise InvalidConfigError(f"{key} must be a number")
            val = float(val)
        elif not isinstance(val, str):
            raise InvalidConfigError(f"{key} must be a string")
        values[key] = val
    return cls(**values)


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"{path}: invalid JSON ({exc})") from None


def dump_json(data: dict) -> str:
    return json.dumps(data, indent=2) + "\n"
