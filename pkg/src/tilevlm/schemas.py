"""Load and apply the JSON schemas shipped with the package."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema


class SchemaValidationError(ValueError):
    """A document failed its schema; message names the offending field."""


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    path = resources.files("tilevlm") / "schemas" / f"{name}.schema.json"
    return json.loads(path.read_text())


def validate(document: dict, schema_name: str) -> dict:
    """Validate and return the document; raise with a field path on failure."""
    schema = load_schema(schema_name)
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaValidationError(f"{schema_name}: field {where!r}: {err.message}")
    return document
