"""Scenario schema, canonical hashing, and atomic report/CSV output.

A scenario is a JSON document selecting a builtin problem, discretization,
Monte Carlo settings, a reference control, and a task list.  Validation
errors carry the JSON-path location of the offending field.  All outputs
are written atomically (temp file + rename) and embed the canonical
scenario hash so that resumed or compared runs can detect config drift.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile

import numpy as np

TASKS = ("simulate", "cost", "adjoint1", "adjoint2", "verify_duality",
         "first_order", "integral_necessary", "pointwise", "singular",
         "lambda", "taylor", "rates", "certify", "growth_probe")

# tasks implied by others; inserted ahead of the dependent task when absent
TASK_PREREQS = {
    "cost": ("simulate",),
    "adjoint1": ("simulate",),
    "adjoint2": ("simulate",),
    "verify_duality": ("simulate", "adjoint1", "adjoint2"),
    "first_order": ("simulate", "adjoint1"),
    "integral_necessary": ("simulate", "adjoint2"),
    "pointwise": ("simulate", "adjoint2"),
    "singular": ("simulate", "adjoint1", "adjoint2"),
    "lambda": ("simulate", "adjoint2"),
    "taylor": ("simulate", "adjoint2"),
    "rates": ("simulate",),
    "certify": ("simulate", "adjoint2"),
    "growth_probe": ("simulate",),
}

DEFAULTS = {
    "discretization": {"n_modes": 16, "M": 4096, "T": 1.0},
    "monte_carlo": {"n_paths": 10000, "seed": 0},
    "control": {"type": "oracle"},
    "tasks": [{"name": "simulate"}, {"name": "cost"}],
}


class SchemaError(ValueError):
    """Config document violates the scenario schema; carries a location."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


def scenario_schema() -> dict:
    """Machine-readable description of the accepted scenario document."""
    return {
        "problem": {"name": f"one of builtins (see list-problems)",
                    "params": "optional dict of builtin parameters"},
        "discretization": {"n_modes": "int >= 1", "M": "int >= 1 (time steps)",
                           "T": "float > 0 (horizon)"},
        "monte_carlo": {"n_paths": "int >= 1", "seed": "int >= 0"},
        "control": {"type": "zero | oracle | grid",
                    "values": "grid type only: node values, shape (M, m)"},
        "x0": "optional initial coefficient list (builtin default otherwise)",
        "tasks": [{"name": f"one of {TASKS}",
                   "...": "per-task parameters (n_directions, eps_ladder, "
                          "rho, sigma, tau, n_tuples, n_samples, seed)"}],
        "output_dir": "optional output directory (default: CLI --out or cwd)",
    }


def _require(cond, location, message):
    if not cond:
        raise SchemaError(location, message)


def validate_scenario(doc: dict) -> dict:
    """Validate and normalize a scenario: defaults applied, prerequisites
    auto-inserted.  Returns the effective scenario document."""
    _require(isinstance(doc, dict), "$", "scenario must be a JSON object")
    allowed = {"problem", "discretization", "monte_carlo", "control", "x0",
               "tasks", "output_dir"}
    for key in doc:
        _require(key in allowed, f"$.{key}",
                 "unknown field (run the schema verb for the accepted shape)")
    out = {}
    _require("problem" in doc, "$.problem", "missing required section")
    prob = doc["problem"]
    _require(isinstance(prob, dict) and "name" in prob, "$.problem",
             "must be an object with a 'name'")
    _require(isinstance(prob["name"], str), "$.problem.name", "must be a string")
    out["problem"] = {"name": prob["name"],
                      "params": dict(prob.get("params", {}))}

    disc = {**DEFAULTS["discretization"], **doc.get("discretization", {})}
    _require(int(disc["n_modes"]) >= 1, "$.discretization.n_modes", "must be >= 1")
    _require(int(disc["M"]) >= 1, "$.discretization.M", "must be >= 1")
    _require(float(disc["T"]) > 0, "$.discretization.T", "must be > 0")
    out["discretization"] = {"n_modes": int(disc["n_modes"]),
                             "M": int(disc["M"]), "T": float(disc["T"])}

    mc = {**DEFAULTS["monte_carlo"], **doc.get("monte_carlo", {})}
    _require(int(mc["n_paths"]) >= 1, "$.monte_carlo.n_paths", "must be >= 1")
    _require(int(mc["seed"]) >= 0, "$.monte_carlo.seed", "must be >= 0")
    out["monte_carlo"] = {"n_paths": int(mc["n_paths"]), "seed": int(mc["seed"])}

    ctl = {**DEFAULTS["control"], **doc.get("control", {})}
    _require(ctl.get("type") in ("zero", "oracle", "grid"), "$.control.type",
             "must be one of zero | oracle | grid")
    out["control"] = ctl
    if "x0" in doc:
        _require(isinstance(doc["x0"], (list, tuple)), "$.x0",
                 "must be a list of coefficients")
        out["x0"] = [float(v) for v in doc["x0"]]

    tasks = doc.get("tasks", DEFAULTS["tasks"])
    _require(isinstance(tasks, list), "$.tasks", "must be a list")
    seen = []
    effective = []
    for i, task in enumerate(tasks):
        _require(isinstance(task, dict) and "name" in task, f"$.tasks[{i}]",
                 "each task must be an object with a 'name'")
        name = task["name"]
        _require(name in TASKS, f"$.tasks[{i}].name",
                 f"unknown task {name!r}; valid: {', '.join(TASKS)}")
        for pre in TASK_PREREQS.get(name, ()):
            if pre not in seen:
                effective.append({"name": pre, "auto_inserted": True})
                seen.append(pre)
        effective.append(dict(task))
        if name not in seen:
            seen.append(name)
    out["tasks"] = effective
    if "output_dir" in doc:
        out["output_dir"] = str(doc["output_dir"])
    return out


# ---------------------------------------------------------------------------
# canonical hash and JSON plumbing


def jsonable(obj):
    """Recursively convert numpy scalars/arrays into plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def scenario_hash(effective: dict) -> str:
    """SHA-256 of the canonicalized effective scenario."""
    canon = json.dumps(jsonable(effective), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def atomic_write_text(path: str, text: str):
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_report_json(path: str, report: dict):
    atomic_write_text(path, json.dumps(jsonable(report), indent=2,
                                       sort_keys=True) + "\n")


def write_ensemble_csv(path: str, X: np.ndarray, n_modes: int,
                       max_paths: int = 16):
    """Ensemble CSV with fixed columns (path,node,component,value); only the
    first `max_paths` paths are written to keep files plot-sized."""
    n_paths, n_nodes, d = X.shape
    n_comp = d // n_modes
    rows = ["path,node,component,value"]
    for p in range(min(n_paths, max_paths)):
        for k in range(n_nodes):
            for c in range(n_comp):
                for mode in range(n_modes):
                    rows.append(f"{p},{k},{c * n_modes + mode},"
                                f"{X[p, k, c * n_modes + mode]!r}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def write_condition_csv(path: str, reports):
    """Condition table CSV: (quantity,estimate,stderr,allowance,verdict)."""
    rows = ["quantity,estimate,stderr,allowance,verdict"]
    for r in reports:
        d = r.to_dict() if hasattr(r, "to_dict") else dict(r)
        rows.append(f"{d['quantity']},{d['estimate']!r},{d['stderr']!r},"
                    f"{d['allowance']!r},{d['verdict']}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def write_table_csv(path: str, header, rows):
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(repr(v) if isinstance(v, float) else str(v)
                            for v in row))
    atomic_write_text(path, "\n".join(out) + "\n")
