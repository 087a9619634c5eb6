"""Shipped JSON schemas and a validator that reports the failing JSON path."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

from ..errors import ValidationError

NAMES = ("workload", "server_config", "simulation_result", "placement_result", "forest_model")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in NAMES:
        raise KeyError(name)
    text = resources.files(__package__).joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def _path(err) -> str:
    parts = ["$"]
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts)


def validate(doc, name: str) -> None:
    schema = load_schema(name)
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise ValidationError(_path(err), err.message)
