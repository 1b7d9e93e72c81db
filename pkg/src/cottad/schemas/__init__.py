"""JSON schemas for every document the CLI reads or writes."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

SCHEMA_NAMES = (
    "model_config",
    "flops_report",
    "ablation_audit",
    "metrics_report",
    "dataset_manifest",
    "weights_manifest",
    "gradcheck_report",
    "bench_report",
)


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in SCHEMA_NAMES:
        raise KeyError(f"no schema named {name!r}")
    return json.loads(resources.files(__package__).joinpath(f"{name}.schema.json").read_text())


def validate(doc, name: str) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match schema ``name``."""
    jsonschema.validate(doc, load_schema(name))
