"""Validation against the JSON schemas shipped with the package.

Payloads that cross a trust boundary (HTTP bodies, config files, manifests
read by the service) are checked here before any compute module sees them.
"""

from __future__ import annotations

import functools
import json
from importlib import resources

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

SCHEMA_FILES = (
    "lighting_spec.schema.json",
    "pipeline_config.schema.json",
    "frame_set_manifest.schema.json",
)


class SchemaError(ValueError):
    """Payload rejected by a schema; `path` points at the offending field."""

    def __init__(self, message: str, path: str):
        super().__init__(message)
        self.path = path


def _load(name: str) -> dict:
    return json.loads(resources.files("lightforge.schemas").joinpath(name).read_text())


@functools.lru_cache(maxsize=None)
def validator(name: str) -> Draft202012Validator:
    if name not in SCHEMA_FILES:
        raise ValueError(f"unknown schema {name!r}")
    docs = [_load(f) for f in SCHEMA_FILES]
    registry = Registry().with_resources(
        (doc["$id"], Resource.from_contents(doc)) for doc in docs
    )
    return Draft202012Validator(_load(name), registry=registry)


def check(name: str, payload) -> None:
    """Raise SchemaError (with the JSON path of the first failure) if invalid."""
    errors = sorted(validator(name).iter_errors(payload), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise SchemaError(f"{first.json_path}: {first.message}", first.json_path)
