"""Command-line front end: scenario runs, convergence studies, listings.

Verbs:
  seeopt run <scenario.json>    execute a task list, write report.json + CSVs
  seeopt study <study.json>     sweep M / eps / n_paths and fit slopes
  seeopt list-problems          builtin problem names
  seeopt schema                 print the scenario schema

Exit status: 0 success, 1 a task errored (run continues past it),
2 config/schema error.  Verdicts never affect the exit status.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .adjoint import (UnsupportedRegimeError, solve_first_adjoint_affine,
                      solve_first_adjoint_regression, solve_second_adjoint,
                      verify_relaxed_transposition, verify_transposition,
                      _controls_along)
from .conditions import (check_integral_necessary, check_pointwise_necessary,
                         classify_singular, control_grid_norm,
                         evaluate_derivatives, first_order_gap, lambda_full,
                         lambda_tilde, quadratic_growth_probe,
                         sufficient_certificate, taylor_consistency)
from .forward import (GridControl, HeatOptimalControl, ZeroControl,
                      solve_state, variational_remainders)
from .noise import make_brownian
from .problems import BUILTIN_PROBLEMS, build_problem
from .report import (SchemaError, jsonable, scenario_hash, scenario_schema,
                     validate_scenario, write_condition_csv,
                     write_ensemble_csv, write_report_json, write_table_csv)
from .spectral import h1_weights


def _strip_arrays(obj):
    """Drop bulky per-path arrays from report dicts, keeping summaries."""
    if isinstance(obj, dict):
        return {k: _strip_arrays(v) for k, v in obj.items()
                if not (isinstance(v, np.ndarray) and v.size > 64)}
    if isinstance(obj, list):
        return [_strip_arrays(v) for v in obj]
    return obj


def _smooth_directions(rng, times, m, n_directions, scale=0.5):
    """Deterministic, temporally smooth direction node values (n, M, m)."""
    tt = times[:-1] / max(times[-1], 1e-300)
    basis = np.stack([np.ones_like(tt), tt, tt ** 2], axis=1)
    return np.einsum("tb,nbm->ntm",
                     basis, rng.standard_normal((n_directions, 3, m)) * scale)


class ScenarioRunner:
    """Executes a validated scenario's task list sequentially, caching the
    artifacts later tasks depend on (state ensemble, adjoints)."""

    def __init__(self, effective: dict, out_dir: str, threads: int = 1):
        self.cfg = effective
        self.out_dir = out_dir
        self.threads = threads  # bookkeeping only: execution is sequential
        disc, mc = effective["discretization"], effective["monte_carlo"]
        self.problem, self.oracle = build_problem(
            effective["problem"]["name"], n_modes=disc["n_modes"],
            T=disc["T"], params=effective["problem"]["params"])
        self.grid = make_brownian(seed=mc["seed"], n_paths=mc["n_paths"],
                                  M=disc["M"], T=disc["T"])
        self.control = self._build_control(effective["control"])
        self.x0 = self._build_x0(effective.get("x0"))
        self.state = None
        self.U = None
        self.adjoint = None
        self.second = None
        self.derivs = None
        self.condition_reports = []
        self.results = {}

    # -- construction helpers ----------------------------------------------
    def _build_control(self, spec):
        if spec["type"] == "zero":
            return ZeroControl(self.problem.control_dim)
        if spec["type"] == "oracle":
            if self.oracle is None:
                # builtins without a closed-form control default to zero
                return ZeroControl(self.problem.control_dim)
            return HeatOptimalControl(self.oracle)
        values = np.asarray(spec.get("values", []), dtype=float)
        if values.shape != (self.grid.M, self.problem.control_dim):
            raise SchemaError("$.control.values",
                              f"grid control needs shape "
                              f"({self.grid.M}, {self.problem.control_dim})")
        return GridControl(values)

    def _build_x0(self, x0):
        if x0 is not None:
            arr = np.asarray(x0, dtype=float)
            if arr.shape != (self.problem.dim,):
                raise SchemaError("$.x0", f"needs {self.problem.dim} entries")
            return arr
        if self.oracle is not None:
            n = self.oracle.n_modes
            return np.concatenate([self.oracle.a_coeffs,
                                   np.zeros(self.problem.dim - n)])
        return np.zeros(self.problem.dim)

    def _task_rng(self, task, salt):
        seed = int(task.get("seed", self.cfg["monte_carlo"]["seed"]))
        return np.random.Generator(np.random.Philox(
            key=np.array([seed, salt], dtype=np.uint64)))

    def _need_derivs(self):
        if self.derivs is None:
            self.derivs = evaluate_derivatives(
                self.problem, self.grid, self.state.X, self.U,
                adjoint=self.adjoint, second=self.second)
        return self.derivs

    # -- tasks ---------------------------------------------------------------
    def run_task(self, task):
        name = task["name"]
        return getattr(self, "task_" + name)(task)

    def task_simulate(self, task):
        self.state = solve_state(self.problem, self.control, self.grid,
                                 self.x0, store="full")
        self.U, _ = _controls_along(self.problem, self.grid, self.control,
                                    self.state.X)
        path = os.path.join(self.out_dir, "ensemble.csv")
        write_ensemble_csv(path, self.state.X, self.problem.n_modes,
                           max_paths=int(task.get("csv_paths", 8)))
        return {"terminal_rms": float(np.sqrt(np.mean(
            np.sum(self.state.terminal ** 2, axis=-1)))),
            "csv": "ensemble.csv"}

    def task_cost(self, task):
        return {"estimate": self.state.cost_mean,
                "stderr": self.state.cost_stderr}

    def task_adjoint1(self, task):
        method = task.get("method",
                          "affine" if self.problem.is_affine else "regression")
        if method == "affine":
            self.adjoint = solve_first_adjoint_affine(
                self.problem, self.grid, self.control, self.state.X, self.U)
        else:
            self.adjoint = solve_first_adjoint_regression(
                self.problem, self.grid, self.control, self.state.X, self.U,
                degree=int(task.get("degree", 2)))
        self.derivs = None
        return {"method": self.adjoint.method,
                "sup_rms_p": self.adjoint.sup_rms_p(),
                "sup_rms_q": self.adjoint.sup_rms_q()}

    def task_adjoint2(self, task):
        self.second = solve_second_adjoint(self.problem, self.grid.times)
        self.derivs = None
        P0 = self.second.P[0]
        return {"P0_diag": np.diag(P0), "P0_max_abs": float(np.max(np.abs(P0))),
                "symmetric": bool(np.allclose(P0, P0.T))}

    def task_verify_duality(self, task):
        n_tuples = int(task.get("n_tuples", 10))
        seed = int(task.get("seed", self.cfg["monte_carlo"]["seed"]))
        rep1 = verify_transposition(self.problem, self.grid, self.adjoint,
                                    self.state.X, self.U, n_tuples=n_tuples,
                                    seed=seed)
        rep2 = verify_relaxed_transposition(self.problem, self.grid,
                                            self.second, n_tuples=n_tuples,
                                            seed=seed)
        rows = [(r["tuple"], rep["identity"], r["residual"], r["stderr"],
                 r["margin"], "pass" if r["passed"] else "fail")
                for rep in (rep1, rep2) for r in rep["rows"]]
        write_table_csv(os.path.join(self.out_dir, "duality.csv"),
                        ("tuple", "identity", "residual", "stderr", "margin",
                         "verdict"), rows)
        return {"transposition": _strip_arrays(rep1),
                "relaxed_transposition": _strip_arrays(rep2)}

    def task_first_order(self, task):
        derivs = self._need_derivs()
        rng = self._task_rng(task, 0x01)
        n_dir = int(task.get("n_directions", 5))
        dirs = _smooth_directions(rng, self.grid.times,
                                  self.problem.control_dim, n_dir)
        out = []
        for vals in dirs:
            dU = np.broadcast_to(vals, (self.grid.n_paths,) + vals.shape)
            rep = first_order_gap(derivs, dU)
            self.condition_reports.append(rep)
            out.append(_strip_arrays(rep.to_dict()))
        return {"gaps": out}

    def task_integral_necessary(self, task):
        derivs = self._need_derivs()
        rng = self._task_rng(task, 0x02)
        n_dir = int(task.get("n_directions", 5))
        dirs = _smooth_directions(rng, self.grid.times,
                                  self.problem.control_dim, n_dir)
        out = []
        for vals in dirs:
            U_other = self.problem.control_set.project(self.U + vals[None])
            rep = check_integral_necessary(derivs, U_other)
            self.condition_reports.append(rep)
            out.append(_strip_arrays(rep.to_dict()))
        return {"checks": out}

    def task_pointwise(self, task):
        derivs = self._need_derivs()
        rng = self._task_rng(task, 0x03)
        taus = task.get("tau", [0.5 * self.grid.T])
        if not isinstance(taus, list):
            taus = [taus]
        n_trials = int(task.get("n_trials", 3))
        out = []
        for tau in taus:
            for _ in range(n_trials):
                v = self.problem.control_set.project(
                    rng.standard_normal(self.problem.control_dim) * 0.5)
                rep = check_pointwise_necessary(derivs, float(tau), v)
                self.condition_reports.append(rep)
                out.append(_strip_arrays(rep.to_dict()))
        return {"checks": out}

    def task_singular(self, task):
        derivs = self._need_derivs()
        rng = self._task_rng(task, 0x04)
        n_v = int(task.get("n_sample_v", 5))
        sample = self.problem.control_set.project(
            rng.standard_normal((n_v, self.problem.control_dim)) * 0.5)
        rep = classify_singular(derivs, sample, tol=float(task.get("tol", 1e-6)))
        self.condition_reports.append(rep)
        return _strip_arrays(rep.to_dict())

    def task_lambda(self, task):
        derivs = self._need_derivs()
        rng = self._task_rng(task, 0x05)
        n_dir = int(task.get("n_directions", 3))
        dirs = _smooth_directions(rng, self.grid.times,
                                  self.problem.control_dim, n_dir)
        out = []
        for vals in dirs:
            dU = np.broadcast_to(vals, (self.grid.n_paths,) + vals.shape)
            rep = (lambda_full(derivs, dU) if self.problem.is_affine
                   else lambda_tilde(derivs, dU))
            self.condition_reports.append(rep)
            out.append(_strip_arrays(rep.to_dict()))
        return {"forms": out}

    def task_taylor(self, task):
        derivs = self._need_derivs()
        rng = self._task_rng(task, 0x06)
        eps = task.get("eps_ladder", [0.2, 0.1, 0.05, 0.025])
        vals = _smooth_directions(rng, self.grid.times,
                                  self.problem.control_dim, 1)[0]
        dU = np.broadcast_to(vals, (self.grid.n_paths,) + vals.shape)
        rep = taylor_consistency(self.problem, self.grid, self.control,
                                 GridControl(vals), self.x0, eps, derivs, dU)
        return _strip_arrays(rep)

    def task_rates(self, task):
        rng = self._task_rng(task, 0x07)
        eps = task.get("eps_ladder", [0.2, 0.1, 0.05, 0.025])
        vals = _smooth_directions(rng, self.grid.times,
                                  self.problem.control_dim, 1)[0]
        rep = variational_remainders(self.problem, self.control,
                                     GridControl(vals), self.grid, self.x0,
                                     eps)
        write_table_csv(os.path.join(self.out_dir, "remainders.csv"),
                        ("eps", "r1", "r2"),
                        list(zip(rep["eps"], rep["r1"], rep["r2"])))
        return rep

    def task_certify(self, task):
        derivs = self._need_derivs()
        rng = self._task_rng(task, 0x08)
        n_dir = int(task.get("n_directions", 8))
        rho = float(task.get("rho", 0.25))
        dirs = list(_smooth_directions(rng, self.grid.times,
                                       self.problem.control_dim, n_dir,
                                       scale=0.4)
                    + 0.5)  # keep directions bounded away from zero
        dirs = [self.problem.control_set.project(v) for v in dirs]
        rep = sufficient_certificate(derivs, dirs, rho,
                                     exponent=float(task.get("exponent", 8)))
        self.condition_reports.append(rep)
        return _strip_arrays(rep.to_dict())

    def task_growth_probe(self, task):
        rep = quadratic_growth_probe(
            self.problem, self.grid, self.control, self.x0,
            sigma=float(task.get("sigma", 0.5)),
            rho=float(task.get("rho", 0.25)),
            n_samples=int(task.get("n_samples", 20)),
            seed=int(task.get("seed", self.cfg["monte_carlo"]["seed"])))
        self.condition_reports.append(rep)
        return _strip_arrays(rep.to_dict())


def run_scenario(effective: dict, out_dir: str, threads: int = 1) -> dict:
    """Execute a validated scenario; returns the run report (also written
    to out_dir/report.json along with per-table CSVs)."""
    runner = ScenarioRunner(effective, out_dir, threads)
    t0 = time.time()
    task_results = []
    any_error = False
    for task in effective["tasks"]:
        entry = {"name": task["name"], "params": {k: v for k, v in task.items()
                                                  if k != "name"}}
        try:
            entry["result"] = jsonable(runner.run_task(task))
            entry["status"] = "ok"
        except UnsupportedRegimeError as exc:
            entry["status"] = "failed"
            entry["error"] = str(exc)
            any_error = True
        task_results.append(entry)
    report = {
        "scenario": effective,
        "scenario_hash": scenario_hash(effective),
        "toolkit_version": __version__,
        "threads": threads,
        "norm_conventions": {
            "state": runner.problem.norm_note,
            "H1_realization": "sum (1 + n^2 pi^2) |c_n|^2 on sine coefficients",
        },
        "tasks": task_results,
        "wallclock_seconds": round(time.time() - t0, 3),
        "n_paths": runner.grid.n_paths,
        "exit_status": 1 if any_error else 0,
    }
    os.makedirs(out_dir, exist_ok=True)
    write_report_json(os.path.join(out_dir, "report.json"), report)
    if runner.condition_reports:
        write_condition_csv(os.path.join(out_dir, "conditions.csv"),
                            runner.condition_reports)
    return report


# ---------------------------------------------------------------------------
# convergence studies


def convergence_study(study: dict, out_dir: str) -> dict:
    """Sweep one axis of a base scenario and fit log-log slopes.

    Study document: {"base": <scenario>, "sweep": {"axis": "M" | "eps" |
    "n_paths", "values": [...]}, "quantity": "strong_error" | "remainders"}.
    Seeds are shared across the sweep so increments couple (common random
    numbers); for an M-sweep the coarse grids are increment-sums of the
    finest one.
    """
    base = validate_scenario(study.get("base", {}))
    sweep = study.get("sweep", {})
    axis, values = sweep.get("axis"), sweep.get("values", [])
    if axis not in ("M", "eps", "n_paths"):
        raise SchemaError("$.sweep.axis", "must be M, eps, or n_paths")
    if len(values) < 3:
        raise SchemaError("$.sweep.values",
                          "need at least 3 points for a slope fit")
    quantity = study.get("quantity", "strong_error")
    disc, mc = base["discretization"], base["monte_carlo"]
    rows = []
    if quantity == "strong_error":
        # pathwise sup-error of the first heat mode against its closed form,
        # coupled via increment coarsening of the finest grid
        from .noise import coarsen
        from .problems import heat_example
        if axis != "M":
            raise SchemaError("$.sweep.axis",
                              "strong_error sweeps the step count M")
        values = sorted(int(v) for v in values)
        M_fine = values[-1]
        n = disc["n_modes"]
        prob, oracle = build_problem(base["problem"]["name"],
                                     n_modes=n, T=disc["T"],
                                     params=base["problem"]["params"])
        if oracle is None:
            raise SchemaError("$.base.problem", "strong_error needs the heat builtin")
        fine = make_brownian(seed=mc["seed"], n_paths=mc["n_paths"],
                             M=M_fine, T=disc["T"])
        x0 = np.concatenate([oracle.a_coeffs, np.zeros(prob.dim - n)])
        from .noise import brownian_paths
        for M in values:
            grid = coarsen(fine, M_fine // M) if M != M_fine else fine
            st = solve_state(prob, HeatOptimalControl(oracle), grid, x0,
                             store="full", with_cost=False)
            W = brownian_paths(grid)
            ref = oracle.state_phi1(np.broadcast_to(grid.times, W.shape), W)
            err = np.abs(st.X[:, :, 0] - ref[:, :, 0])
            sup = np.max(err, axis=1) / np.maximum(
                np.max(np.abs(ref[:, :, 0]), axis=1), 1e-300)
            rows.append((M, float(np.mean(sup)),
                         float(np.std(sup, ddof=1) / np.sqrt(grid.n_paths))))
        x = np.log([r[0] for r in rows])
        y = np.log([r[1] for r in rows])
        slope = -float(np.polyfit(x, y, 1)[0])  # error ~ M^{-slope}
    elif quantity == "remainders":
        raise SchemaError("$.quantity",
                          "remainder ladders run via the 'rates' task")
    else:
        raise SchemaError("$.quantity", f"unknown study quantity {quantity!r}")
    result = {"axis": axis, "quantity": quantity, "rows": rows,
              "slope": slope, "scenario_hash": scenario_hash(base)}
    os.makedirs(out_dir, exist_ok=True)
    write_table_csv(os.path.join(out_dir, "study.csv"),
                    (axis, "estimate", "stderr"), rows)
    write_report_json(os.path.join(out_dir, "study.json"), result)
    return result


# ---------------------------------------------------------------------------
# argument parsing


def _apply_overrides(effective, args):
    over = {}
    if args.seed is not None:
        effective["monte_carlo"]["seed"] = over["seed"] = args.seed
    if args.paths is not None:
        effective["monte_carlo"]["n_paths"] = over["paths"] = args.paths
    if args.modes is not None:
        effective["discretization"]["n_modes"] = over["modes"] = args.modes
    if args.steps is not None:
        effective["discretization"]["M"] = over["steps"] = args.steps
    if over:
        effective["cli_overrides"] = over
    return effective


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="seeopt",
        description="Second-order optimality conditions toolkit for "
                    "controlled stochastic evolution equations")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--paths", type=int, default=None)
    ap.add_argument("--modes", type=int, default=None)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--out", type=str, default=".")
    ap.add_argument("--threads", type=int, default=1,
                    help="parallelism cap (recorded; execution is "
                         "sequential, so results never depend on it)")
    sub = ap.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="execute a scenario file")
    p_run.add_argument("scenario")
    p_study = sub.add_parser("study", help="run a convergence study")
    p_study.add_argument("study")
    sub.add_parser("list-problems", help="list builtin problems")
    sub.add_parser("schema", help="print the scenario schema")
    args = ap.parse_args(argv)

    if args.verb == "list-problems":
        for name in BUILTIN_PROBLEMS:
            print(name)
        return 0
    if args.verb == "schema":
        print(json.dumps(scenario_schema(), indent=2))
        return 0
    try:
        with open(args.scenario if args.verb == "run" else args.study) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        if args.verb == "run":
            effective = _apply_overrides(validate_scenario(doc), args)
            out_dir = effective.get("output_dir", args.out)
            report = run_scenario(effective, out_dir, threads=args.threads)
            print(f"report written to {os.path.join(out_dir, 'report.json')}")
            return report["exit_status"]
        effective_out = doc.get("output_dir", args.out)
        result = convergence_study(doc, effective_out)
        print(f"study written to {os.path.join(effective_out, 'study.json')} "
              f"(slope {result['slope']:.3f})")
        return 0
    except SchemaError as exc:
        print(f"schema error at {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
