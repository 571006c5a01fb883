"""Run reports: a versioned JSON envelope around fit, selection and study results.

Wall-clock quantities and timestamps live only under ``timing`` so that two
runs of the same command can be compared byte for byte after dropping it.
"""

from __future__ import annotations

import hashlib
import json
import math
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .selection import SelectionOutcome
from .solver import SolveResult

REPORT_SCHEMA = 1


class ReportError(ValueError):
    pass


def clean(obj):
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def canonical(obj) -> str:
    return json.dumps(clean(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical(config).encode()).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def fit_payload(res: SolveResult) -> dict:
    return {
        "status": res.status,
        "radius": res.radius,
        "sse": res.sse,
        "vaf": res.vaf,
        "outer_iters": res.outer_iters,
        "deviations": dict(zip(res.names, res.deviations)),
        "params": dict(zip(res.names, res.params)),
        "active": res.active,
        "starts": res.starts,
    }


def selection_payload(out: SelectionOutcome) -> dict:
    return {
        "radius": out.radius,
        "selected": out.selected,
        "rounds": out.rounds,
        "round_trace": [{"round": i + 1, "radius": t, "num_params": k}
                        for i, (t, k) in enumerate(out.round_trace)],
        "fit": fit_payload(out.result),
    }


def empty_metrics() -> dict:
    return {"vaf": None, "bias": None, "variance": None, "improvement": None}


def build_report(command: str, argv, config: dict, spec: str | None, payload: dict,
                 metrics: dict | None = None, started: str | None = None,
                 wall_time: float = 0.0, extra_timing: dict | None = None) -> dict:
    report = {
        "report_schema": REPORT_SCHEMA,
        "tool_version": __version__,
        "command": {"name": command, "argv": [str(a) for a in argv]},
        "config": config,
        "config_hash": config_hash(config),
        "spec": spec,
        "payload": payload,
        "metrics": {**empty_metrics(), **(metrics or {})},
        "timing": {"started": started or now(), "finished": now(),
                   "wall_time_s": float(wall_time), **(extra_timing or {})},
    }
    return clean(report)


@lru_cache(maxsize=None)
def schema() -> dict:
    text = resources.files("sparse_nls.schemas").joinpath("report.schema.json").read_text()
    return json.loads(text)


def validate(report: dict) -> None:
    try:
        jsonschema.validate(report, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ReportError(f"report fails schema at {where}: {exc.message}") from None


def write_report(report: dict, path) -> None:
    validate(report)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def strip_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}
