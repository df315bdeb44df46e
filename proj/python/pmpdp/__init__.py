"""Verification of stochastic control problems: Python front end."""

import json

from ._core import (
    ConfigError,
    Error,
    FiniteEscape,
    Riccati,
    ValueField,
    preset_names,
    riccati,
)
from . import _core

__all__ = [
    "ConfigError", "Error", "FiniteEscape", "Riccati", "ValueField",
    "effective_config", "list_scenarios", "preset", "preset_names",
    "riccati", "run", "summary_table", "value_field",
]


def list_scenarios():
    """Built-in scenarios as {name: {"description": ..., "defaults": {...}}}."""
    return {name: {"description": desc, "defaults": json.loads(defaults)}
            for name, desc, defaults in _core.list_scenarios()}


def effective_config(config):
    return json.loads(_core.effective_config(_dump(config)))


def preset(name):
    return json.loads(_core.preset_config(name))


def value_field(scenario, t=0.0, anchors=481, samples=10000):
    if isinstance(scenario, str):
        scenario = {"name": scenario}
    return _core.value_field(json.dumps(scenario), t, anchors, samples)


def run(config, out=""):
    """Run an experiment; returns (exit_code, output_dir, cost, report dict)."""
    code, out_dir, cost, report = _core.run(_dump(config), out)
    return code, out_dir, cost, json.loads(report)


def summary_table(report):
    return _core.summary_table(_dump(report))


def _dump(obj):
    return obj if isinstance(obj, str) else json.dumps(obj)
