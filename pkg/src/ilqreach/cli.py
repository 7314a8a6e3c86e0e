"""Command-line runner and result serialization.

``python -m ilqreach run three_player_avoid --out runs/avoid`` runs a
bundled scenario in its own run mode; ``solve``, ``sweep`` and ``rh`` force a
mode. Every run writes comma-separated tables plus ``summary.json``. Tables
hold only deterministic quantities; wall-clock timings go to ``timings.csv``
and the ``timings`` entry of the summary.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from . import costs as costs_mod
from .dynamics import OperatingPoint, zero_control_rollout
from .ilq import SolveResult, epsilon_sweep, solve, verify_local_nash
from .lqgame import LQConditioningError
from .safety import NOMINAL, SAFETY, ExecutionTrace, run_receding_horizon
from .scenario import RUN_MODES, Scenario, ScenarioError, bundled_names, load_scenario

log = logging.getLogger(__name__)

__all__ = ["RunOutput", "RunError", "run", "main", "load_scenario"]


class RunError(RuntimeError):
    """A solver failure, tagged with the scenario name and run mode."""

    def __init__(self, scenario: str, mode: str, cause: BaseException):
        self.scenario = scenario
        self.mode = mode
        self.cause = cause
        super().__init__(f"scenario {scenario!r} ({mode}): {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class RunOutput:
    """What a run wrote and whether every solve in it converged."""

    scenario: str
    mode: str
    output_dir: Path
    converged: bool
    summary: dict
    files: tuple


# ---------------------------------------------------------------------------
# Table writers
# ---------------------------------------------------------------------------


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])
    return path


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def write_trajectory(path: Path, system, op: OperatingPoint, dt: float) -> Path:
    """One row per (time, player): that player's state and the control applied from it.

    Players with smaller state or control dimension leave trailing cells
    empty; the final time has no control.
    """
    nx = max(system.player_state_slice(i).stop - system.player_state_slice(i).start for i in range(system.num_players))
    nu = max(system.control_dims)
    header = ["t", "player"] + [f"x{k}" for k in range(nx)] + [f"u{k}" for k in range(nu)]
    T = op.horizon

    def rows():
        for t in range(T + 1):
            for i in range(system.num_players):
                x = list(op.xs[t, system.player_state_slice(i)])
                u = list(op.us[i][t]) if t < T else []
                yield [t * dt, i] + x + [None] * (nx - len(x)) + u + [None] * (nu - len(u))

    return _write_csv(path, header, rows())


def _pairs(system):
    out = []
    for i, j in combinations(range(system.num_players), 2):
        pi, pj = system.position_indices(i), system.position_indices(j)
        if pi and len(pi) == len(pj):
            out.append((i, j, list(pi), list(pj)))
    return out


def distances(system, xs: np.ndarray) -> dict:
    """Euclidean distance over time for every pair of players with comparable positions."""
    return {(i, j): np.linalg.norm(xs[:, pi] - xs[:, pj], axis=1) for i, j, pi, pj in _pairs(system)}


def min_separation(system, xs: np.ndarray) -> float | None:
    d = distances(system, xs)
    return float(min(v.min() for v in d.values())) if d else None


def write_distances(path: Path, system, xs: np.ndarray, dt: float) -> Path | None:
    d = distances(system, xs)
    if not d:
        return None
    keys = list(d)
    header = ["t"] + [f"d_{i}_{j}" for i, j in keys]
    return _write_csv(path, header, ([t * dt] + [d[k][t] for k in keys] for t in range(xs.shape[0])))


def write_iterations(path: Path, result: SolveResult) -> Path:
    n = len(result.relaxed_costs)
    header = ["iteration", "step", "change"] + [f"relaxed_cost_{i}" for i in range(n)] + [f"active_time_{i}" for i in range(n)]
    rows = ([h.iteration, h.step, h.change, *h.relaxed_costs, *h.active_times] for h in result.history)
    return _write_csv(path, header, rows)


def write_modes(path: Path, trace: ExecutionTrace) -> Path:
    header = [
        "invocation",
        "step",
        "t",
        "mode",
        "safety_value",
        "nominal_converged",
        "nominal_iterations",
        "safety_converged",
        "safety_iterations",
        "warm_started",
        "degraded",
    ]
    rows = (
        [
            r.index,
            r.step,
            r.time,
            r.mode,
            r.safety_value,
            r.nominal_converged,
            r.nominal_iterations,
            r.safety_converged,
            r.safety_iterations,
            r.warm_started,
            r.degraded,
        ]
        for r in trace.records
    )
    return _write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# Run modes
# ---------------------------------------------------------------------------


def _result_summary(result: SolveResult, system) -> dict:
    return {
        "status": result.status,
        "converged": result.converged,
        "iterations": result.iterations,
        "epsilons": list(result.epsilons),
        "relaxed_costs": list(result.relaxed_costs),
        "unrelaxed_costs": list(result.unrelaxed_costs),
        "min_separation": min_separation(system, result.operating_point.xs),
    }


def _nash(result, system, costs, verify, seed) -> dict | None:
    if verify is None or not result.converged:
        return None
    k, radius = verify
    rep = verify_local_nash(result, system, costs, perturbation_count=int(k), radius=float(radius), rng=seed)
    return {
        "perturbations": rep.perturbation_count,
        "radius": rep.radius,
        "fractions": list(rep.fractions),
        "best_improvements": list(rep.best_improvements),
        "is_local_nash": rep.is_local_nash,
    }


def _write_solve(out: Path, scenario, system, costs, result, verify, seed, files) -> dict:
    files.append(write_trajectory(out / "trajectory.csv", system, result.operating_point, scenario.dt))
    files.append(write_iterations(out / "iterations.csv", result))
    d = write_distances(out / "distances.csv", system, result.operating_point.xs, scenario.dt)
    if d is not None:
        files.append(d)
    summary = _result_summary(result, system)
    summary["nash"] = _nash(result, system, costs, verify, seed)
    return summary


def _run_solve(scenario, system, costs, x1, config, out, verify, seed, files, timings):
    T = scenario.horizon_steps
    try:
        result = solve(system, costs, x1, T, config)
    except LQConditioningError as err:
        partial = getattr(err, "partial", None)
        if partial is not None:
            _write_solve(out, scenario, system, costs, partial, None, seed, files)
        raise
    timings.append(("solve", result.wall_time))
    summary = _write_solve(out, scenario, system, costs, result, verify, seed, files)
    zero = zero_control_rollout(system, x1, T)
    resolved = [c.with_epsilon(e) for c, e in zip(costs, result.epsilons)] if result.epsilons else costs
    summary["zero_control"] = {
        "unrelaxed_costs": [costs_mod.evaluate(c, zero, i, relaxed=False) for i, c in enumerate(resolved)],
        "min_separation": min_separation(system, zero.xs),
    }
    return summary, result.converged


def _run_sweep(scenario, system, costs, x1, config, epsilons, out, verify, seed, files, timings):
    results = epsilon_sweep(system, costs, x1, scenario.horizon_steps, epsilons, config)
    per = []
    rows = []
    for k, (eps, res) in enumerate(zip(epsilons, results)):
        sub = out / f"eps_{k:02d}"
        s = _write_solve(sub, scenario, system, costs, res, verify, seed, files)
        s["epsilon"] = eps
        per.append(s)
        timings.append((f"solve_eps_{k:02d}", res.wall_time))
        rows.append([eps, res.status, res.converged, res.iterations, s["min_separation"], *res.unrelaxed_costs, *res.relaxed_costs])
    n = system.num_players
    header = ["epsilon", "status", "converged", "iterations", "min_separation"]
    header += [f"unrelaxed_cost_{i}" for i in range(n)] + [f"relaxed_cost_{i}" for i in range(n)]
    files.append(_write_csv(out / "sweep.csv", header, rows))
    return {"solves": per}, all(r.converged for r in results)


def _trace_summary(trace: ExecutionTrace, system) -> dict:
    recs = trace.records
    return {
        "invocations": len(recs),
        "safety_activations": sum(r.mode == SAFETY for r in recs),
        "switches": trace.switch_count(),
        "mode_consistent": trace.mode_consistent(),
        "degraded": sum(r.degraded for r in recs),
        "nominal_converged": sum(r.nominal_converged for r in recs),
        "safety_solves": sum(r.safety_converged is not None for r in recs),
        "safety_converged": sum(bool(r.safety_converged) for r in recs),
        "ego_min_separation": trace.min_separation(system),
        "min_separation": min_separation(system, trace.states),
    }


def _trace_ok(trace: ExecutionTrace) -> bool:
    return all(r.nominal_converged and r.safety_converged is not False and not r.degraded for r in trace.records)


def _run_rh(scenario, system, costs, x1, config, out, files, timings):
    safety_costs = scenario.build_safety_costs(system)
    rh = scenario.rh_config()
    summary = {}
    ok = True
    runs = [("executed", out, False)]
    if scenario.receding_horizon.get("compare_nominal", True):
        runs.append(("nominal_only", out / "nominal_only", True))
    for label, sub, only in runs:
        trace = run_receding_horizon(system, costs, safety_costs, x1, rh, config, nominal_only=only)
        files.append(write_trajectory(sub / "trajectory.csv", system, trace.executed(), scenario.dt))
        files.append(write_modes(sub / "modes.csv", trace))
        d = write_distances(sub / "distances.csv", system, trace.states, scenario.dt)
        if d is not None:
            files.append(d)
        timings.extend((f"{label}_invocation_{r.index:03d}", r.wall_time) for r in trace.records)
        summary[label] = _trace_summary(trace, system)
        summary[label]["median_invocation_time"] = float(np.median(trace.wall_times))
        ok = ok and _trace_ok(trace)
    return summary, ok


def run(
    scenario: Scenario,
    output_dir,
    mode: str | None = None,
    seed: int | None = None,
    epsilon: float | None = None,
    max_iterations: int | None = None,
    verify_nash: tuple | None = None,
    epsilons: Sequence[float] | None = None,
) -> RunOutput:
    """Run ``scenario`` and write its tables and ``summary.json`` into ``output_dir``.

    ``mode`` overrides the scenario's run mode; ``epsilon`` and
    ``max_iterations`` override the solver block; ``verify_nash`` is
    ``(perturbations, radius)`` and defaults to the scenario's block.
    Solver errors are re-raised as :class:`RunError` after the tables
    produced so far and a summary have been written.
    """
    mode = mode or scenario.run_mode
    if mode not in RUN_MODES:
        raise ValueError(f"unknown run mode {mode!r}")
    seed = scenario.seed if seed is None else int(seed)
    if verify_nash is None and scenario.verify_nash is not None:
        verify_nash = (scenario.verify_nash["perturbations"], scenario.verify_nash["radius"])
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = scenario.build_system()
    costs = scenario.build_costs(system)
    x1 = scenario.initial_state()
    config = scenario.solver_config(epsilon=epsilon, max_iterations=max_iterations)
    files: list[Path] = []
    timings: list[tuple] = []
    summary = {
        "scenario": scenario.name,
        "mode": mode,
        "seed": seed,
        "players": [p.name for p in scenario.players],
        "dt": scenario.dt,
        "horizon_steps": scenario.horizon_steps,
    }
    tic = time.perf_counter()
    converged = False
    error = None
    try:
        if mode == "solve":
            body, converged = _run_solve(scenario, system, costs, x1, config, out, verify_nash, seed, files, timings)
        elif mode == "sweep":
            eps = list(epsilons) if epsilons is not None else (scenario.sweep or {}).get("epsilons")
            if not eps:
                raise ValueError("sweep mode needs a list of epsilons (scenario sweep block or --epsilons)")
            body, converged = _run_sweep(scenario, system, costs, x1, replace(config, epsilon=None), eps, out, verify_nash, seed, files, timings)
            summary["epsilons"] = list(eps)
        else:
            if scenario.receding_horizon is None:
                raise ValueError(f"scenario {scenario.name!r} has no receding_horizon block")
            body, converged = _run_rh(scenario, system, costs, x1, config, out, files, timings)
        summary.update(body)
    except (LQConditioningError, FloatingPointError, np.linalg.LinAlgError, RuntimeError, ValueError) as err:
        error = err
        summary["error"] = f"{type(err).__name__}: {err}"
    timings.append(("total", time.perf_counter() - tic))
    summary["converged"] = bool(converged and error is None)
    summary["timings"] = dict(timings)
    files.append(_write_csv(out / "timings.csv", ["phase", "wall_time"], timings))
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(_jsonable(summary), indent=2) + "\n")
    files.append(summary_path)
    if error is not None:
        raise RunError(scenario.name, mode, error) from error
    return RunOutput(scenario.name, mode, out, summary["converged"], summary, tuple(files))


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ilqreach", description="Solve dynamic games with extremum-over-time costs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("scenarios", nargs="+", metavar="scenario", help="scenario file or bundled scenario name")
        sp.add_argument("--out", default=None, help="output directory (default runs/<name>)")
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: scenario seed)")
        sp.add_argument("--epsilon", type=float, default=None, help="override every player's epsilon")
        sp.add_argument("--max-iters", type=int, default=None, help="override solver max_iterations")
        sp.add_argument(
            "--verify-nash", nargs=2, type=float, metavar=("K", "R"), default=None, help="probe K perturbations of radius R per player"
        )
        sp.add_argument("--jobs", type=int, default=1, help="scenarios to run in parallel")

    for name, help_ in (
        ("run", "run each scenario in its own run mode"),
        ("solve", "single game solve"),
        ("sweep", "epsilon sweep with warm starts"),
        ("rh", "receding-horizon run with safety override"),
    ):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        if name == "sweep":
            sp.add_argument("--epsilons", type=float, nargs="+", default=None, help="decreasing epsilon list")
    sub.add_parser("list", help="list bundled scenarios")
    v = sub.add_parser("validate", help="validate scenario files")
    v.add_argument("scenarios", nargs="+", metavar="scenario")
    d = sub.add_parser("show", help="print a scenario with defaults filled in")
    d.add_argument("scenario")
    return p


_MODE = {"run": None, "solve": "solve", "sweep": "sweep", "rh": "receding_horizon"}


def _job(args: tuple) -> tuple:
    ref, out, kw = args
    scenario = load_scenario(ref)
    out = Path(out) if out is not None else Path("runs") / scenario.name
    try:
        res = run(scenario, out, **kw)
    except RunError as err:
        return scenario.name, False, str(err), str(out)
    return scenario.name, res.converged, None, str(out)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "list":
        for name in bundled_names():
            print(f"{name}: {load_scenario(name).description}")
        return 0
    try:
        if args.command == "validate":
            for ref in args.scenarios:
                s = load_scenario(ref)
                print(f"{ref}: ok ({s.name}, {s.num_players} players, mode {s.run_mode})")
            return 0
        if args.command == "show":
            print(load_scenario(args.scenario).to_yaml(), end="")
            return 0
        for ref in args.scenarios:
            load_scenario(ref)
    except (ScenarioError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    kw = {
        "mode": _MODE[args.command],
        "seed": args.seed,
        "epsilon": args.epsilon,
        "max_iterations": args.max_iters,
        "verify_nash": tuple(args.verify_nash) if args.verify_nash else None,
    }
    if args.command == "sweep":
        kw["epsilons"] = args.epsilons
    multi = len(args.scenarios) > 1
    jobs = []
    for ref in args.scenarios:
        out = args.out
        if out is not None and multi:
            out = str(Path(out) / load_scenario(ref).name)
        jobs.append((ref, out, kw))
    if args.jobs > 1 and multi:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    ok = True
    for name, converged, error, out in results:
        if error is not None:
            print(f"{name}: FAILED {error}", file=sys.stderr)
        else:
            print(f"{name}: {'converged' if converged else 'NOT converged'} -> {out}")
        ok = ok and converged and error is None
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
