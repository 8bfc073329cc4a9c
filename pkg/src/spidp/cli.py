"""Command line front-end: ``spidp plan|optimize|validate <scenario>``.

Exit codes: 0 success, 1 numerical or planning failure, 2 input error.
Artifacts go to ``--out``, else the scenario's ``output`` field, else
``$SPIDP_OUTPUT_ROOT/<scenario name>`` (default root ``spidp-out``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import scenario as sc
from .kinematics import ModelError
from .planner import PlanningError, plan
from .program import OptimizationError, ProgramError, optimize, phi_path

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
OUTPUT_ROOT_ENV = "SPIDP_OUTPUT_ROOT"

log = logging.getLogger("spidp")


def fmt(v) -> str:
    """Shortest text that reads back to the same float64."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(rows[0]))


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def write_json(path: Path, doc):
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def output_dir(scn: sc.Scenario, out: str | None, multi_seed: bool) -> Path:
    if out:
        base = Path(out)
    elif scn.output:
        base = (scn.path.parent / scn.output).resolve()
    else:
        base = Path(os.environ.get(OUTPUT_ROOT_ENV, "spidp-out")) / scn.name
    if multi_seed:
        base = base / f"seed-{scn.seed}"
    base.mkdir(parents=True, exist_ok=True)
    return base


# ---------------------------------------------------------------------------


def _history_rows(history):
    keys = [k for k in history[0] if isinstance(history[0][k], (int, float, np.floating))] if history else []
    return keys, [[h[k] for k in keys] for h in history]


def run_plan(path, seed=None, out=None, max_iters=None, multi_seed=False) -> int:
    try:
        scn = sc.load(path, seed=seed, max_iters=max_iters)
        problem = scn.plan_problem()
    except (sc.ScenarioError, ModelError, ProgramError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    dest = output_dir(scn, out, multi_seed)
    try:
        result = plan(problem, scn.planner)
    except PlanningError as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        write_json(dest / "summary.json", {"scenario": scn.name, "seed": scn.seed, "status": "error",
                                           "error": str(exc)})
        return EXIT_FAIL
    traj = result.trajectory
    n = traj.n
    write_csv(dest / "trajectory.csv", ["t"] + [f"q{i}" for i in range(n)] + [f"qd{i}" for i in range(n)],
              np.column_stack([traj.times(), traj.states.data]))
    keys, rows = _history_rows([{"iteration": 0, "r": 0.0, "step": 0.0, **result.initial_errors}]
                               + result.history)
    write_csv(dest / "history.csv", keys, rows)
    summary = {
        "scenario": scn.name,
        "seed": scn.seed,
        "iterations": result.iterations,
        "stop_reason": result.stop_reason,
        "converged_collision_free": result.converged_collision_free,
        "collision_error": result.final_errors["penetration"],
        "final_errors": {k: v for k, v in result.final_errors.items() if k not in ("iteration", "r", "step")},
        "initial_errors": result.initial_errors,
        "planner": scn.planner.to_dict(),
    }
    write_json(dest / "summary.json", summary)
    status = "collision-free" if result.converged_collision_free else "NOT collision-free"
    print(f"{scn.name}: {result.iterations} iterations, {result.stop_reason}, {status} -> {dest}")
    return EXIT_OK if result.converged_collision_free else EXIT_FAIL


def _write_shadow(path: Path, traj):
    write_csv(path, traj.columns(), traj.table())


def run_optimize(path, seed=None, out=None, max_iters=None, multi_seed=False) -> int:
    try:
        scn = sc.load(path, seed=seed, max_iters=max_iters)
        if scn.program is None:
            raise sc.ScenarioError("scenario has no 'program' section")
        x0 = scn.initial_x()
    except (sc.ScenarioError, ModelError, ProgramError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    dest = output_dir(scn, out, multi_seed)
    try:
        res = optimize(scn.program, x0, scn.start, scn.world, scn.chain, scn.optimizer, scn.planner)
    except (PlanningError, ProgramError, OptimizationError, ValueError) as exc:
        print(f"optimization failed: {exc}", file=sys.stderr)
        write_json(dest / "summary.json", {"scenario": scn.name, "seed": scn.seed, "status": "error",
                                           "error": str(exc)})
        return EXIT_FAIL
    names = scn.program.names()
    header = ["iteration", "objective", "phi_cyc", "phi_path", "phi_succ", "grad_norm", "best_objective",
              "collision_free"] + [f"x:{n}" for n in names]
    write_csv(dest / "history.csv", header,
              [[h[k] for k in header[:8]] + list(h["x"]) for h in res.history])
    _write_shadow(dest / "shadow_initial.csv", res.initial)
    _write_shadow(dest / "shadow_final.csv", res.final)
    write_json(dest / "params.json", scn.program.with_x(res.x).to_dict())
    first, best = res.history[0], min(res.history, key=lambda h: h["objective"])
    collision_free = res.final.collision_free
    improved = len(scn.program.slots()) == 0 or best["objective"] < first["objective"]
    summary = {
        "scenario": scn.name,
        "seed": scn.seed,
        "status": res.status,
        "iterations": len(res.history),
        "initial": {k: first[k] for k in ("objective", "phi_cyc", "phi_path", "phi_succ")},
        "best": {k: best[k] for k in ("objective", "phi_cyc", "phi_path", "phi_succ")},
        "final_phi_path": float(phi_path(res.final).data),
        "x_initial": dict(zip(names, x0)),
        "x_final": dict(zip(names, res.x)),
        "collision_free": collision_free,
        "objective_improved": improved,
        "optimizer": scn.optimizer.to_dict(),
    }
    write_json(dest / "summary.json", summary)
    print(f"{scn.name}: objective {first['objective']:.6g} -> {best['objective']:.6g} in "
          f"{len(res.history)} iterations ({res.status}) -> {dest}")
    return EXIT_OK if (collision_free and improved) else EXIT_FAIL


def run_validate(path) -> int:
    issues, defaults = sc.check(path)
    print(json.dumps(_jsonable({"scenario": str(path), "issues": issues, "defaulted": defaults}), indent=2))
    return EXIT_OK if not issues else EXIT_INPUT


def _job(args):
    cmd, path, seed, out, max_iters, multi = args
    fn = run_plan if cmd == "plan" else run_optimize
    return fn(path, seed=seed, out=out, max_iters=max_iters, multi_seed=multi)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spidp", description="Differentiable trajectory planning and skill "
                                "program optimization.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("plan", "plan the scenario's motion"), ("optimize", "optimize program parameters")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("scenario")
        s.add_argument("--seed", type=int, nargs="+", help="seed(s); several seeds run as independent jobs")
        s.add_argument("--out", help="output directory")
        s.add_argument("--jobs", type=int, default=1, help="worker processes for several seeds")
        s.add_argument("--max-iters", type=int, help="override planner j_max / optimizer max_iters")
    v = sub.add_parser("validate", help="check a scenario without running it")
    v.add_argument("scenario")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "validate":
        return run_validate(args.scenario)
    if args.jobs < 1:
        print("input error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    seeds = args.seed or [None]
    multi = len(seeds) > 1
    jobs = [(args.command, args.scenario, s, args.out, args.max_iters, multi) for s in seeds]
    if args.jobs == 1 or not multi:
        codes = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_job, jobs))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
