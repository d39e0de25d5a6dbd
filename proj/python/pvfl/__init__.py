"""Personalised federated learning for behind-the-meter PV disaggregation."""

import json
import os

from ._core import (
    ConfigError,
    Error,
    aggregation_weights,
    compute_lambda,
    mae,
    r2,
    rmse,
)
from . import _core

__all__ = [
    "ConfigError",
    "Error",
    "aggregation_weights",
    "compute_lambda",
    "mae",
    "r2",
    "rmse",
    "run_experiment",
    "run",
    "trace",
    "onboard",
]


def _spec_text(spec):
    if isinstance(spec, (str, os.PathLike)):
        path = os.fspath(spec)
        with open(path) as f:
            return f.read(), os.path.dirname(os.path.abspath(path))
    return json.dumps(spec), os.getcwd()


def run_experiment(spec):
    """Run every strategy in memory. `spec` is a dict or a path to a spec file."""
    text, base = _spec_text(spec)
    return json.loads(_core.run_experiment(text, base))


def run(spec, out):
    """Same outputs as `pvfl run`: round_log.csv, timing.csv, report.json, checkpoints/."""
    text, base = _spec_text(spec)
    _core.cmd_run(text, base, os.fspath(out))


def trace(spec, run_dir, prosumer, date_from, date_to, csv_out, strategies=()):
    text, base = _spec_text(spec)
    _core.cmd_trace(text, base, os.fspath(run_dir), prosumer, date_from, date_to, list(strategies), os.fspath(csv_out))


def onboard(spec, run_dir, rounds):
    text, base = _spec_text(spec)
    return json.loads(_core.cmd_onboard(text, base, os.fspath(run_dir), rounds))
