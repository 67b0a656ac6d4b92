"""Layered run configuration: CLI flags over scenario file over built-in defaults."""

from __future__ import annotations

import copy
import json
import os

from .scenarios import DEFAULTS, ScenarioSpec, _merge

SEED_ENV = "KORNFORGE_SEED"


def resolve(spec_path=None, **cli) -> ScenarioSpec:
    """Merge defaults, an optional scenario file and the non-None CLI values.

    The master seed falls back to KORNFORGE_SEED when neither the file nor the
    command line sets one.
    """
    data = copy.deepcopy(DEFAULTS)
    file_data: dict = {}
    if spec_path:
        with open(spec_path) as fh:
            file_data = json.load(fh)
        data = _merge(data, file_data)
    if "seed" not in file_data and cli.get("seed") is None and os.environ.get(SEED_ENV):
        data["seed"] = int(os.environ[SEED_ENV])
    for key in ("mode", "p", "q", "theta", "seed"):
        if cli.get(key) is not None:
            data[key] = cli[key]
    return ScenarioSpec(data)


def show(spec: ScenarioSpec | None = None) -> str:
    return json.dumps((spec.to_dict() if spec else DEFAULTS), indent=2, sort_keys=True)
