"""Receding-horizon execution with a minimally-invasive safety override.

At every replanning instant the nominal game is solved from the current
state. If the ego's unrelaxed safety objective (a max-over-time cost)
evaluated along the nominal plan exceeds a threshold, the safety game is
solved as well and the ego executes its safety strategy until the next
replan, while every other agent keeps following the nominal strategies.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import costs as costs_mod
from .costs import PlayerCost
from .dynamics import AffineStrategy, MultiPlayerSystem, OperatingPoint, simulate
from .ilq import SolveResult, SolverConfig, solve
from .lqgame import LQConditioningError

log = logging.getLogger(__name__)

NOMINAL = "nominal"
SAFETY = "safety"


def _steps(duration: float, dt: float, what: str) -> int:
    k = duration / dt
    n = int(round(k))
    if abs(k - n) > 1e-9 * max(1.0, abs(k)):
        raise ValueError(f"{what} ({duration}) is not an integer multiple of dt ({dt})")
    return n


@dataclass(frozen=True)
class RecedingHorizonConfig:
    """Timing of the receding-horizon loop, in seconds.

    ``replan_interval=None`` means one ``dt`` step. ``ego`` is the index of
    the player that may switch to its safety strategy.
    """

    total_duration: float
    planning_horizon: float = 2.0
    replan_interval: float | None = None
    safety_threshold: float = 0.0
    ego: int = 0
    warm_start: bool = True

    def __post_init__(self):
        if self.total_duration <= 0:
            raise ValueError("total_duration must be positive")
        if self.planning_horizon <= 0:
            raise ValueError("planning_horizon must be positive")
        if self.replan_interval is not None and self.replan_interval <= 0:
            raise ValueError("replan_interval must be positive")

    def schedule(self, dt: float) -> tuple[int, int, int]:
        """``(T, steps per replan, invocation count)`` for timestep ``dt``."""
        T = _steps(self.planning_horizon, dt, "planning_horizon")
        k = 1 if self.replan_interval is None else _steps(self.replan_interval, dt, "replan_interval")
        if k < 1:
            raise ValueError("replan_interval must be at least one dt")
        if T < k:
            raise ValueError("planning_horizon must be at least replan_interval")
        total = _steps(self.total_duration, dt, "total_duration")
        return T, k, math.ceil(total / k)


@dataclass(frozen=True)
class InvocationRecord:
    index: int
    step: int
    time: float
    mode: str
    safety_value: float
    nominal_costs: tuple
    safety_costs: tuple | None
    nominal_converged: bool
    safety_converged: bool | None
    nominal_iterations: int
    safety_iterations: int | None
    warm_started: bool
    wall_time: float
    degraded: bool = False
    failure: str | None = None


@dataclass(frozen=True)
class ExecutionTrace:
    """Executed closed-loop trajectory and one record per replanning instant."""

    dt: float
    states: np.ndarray
    controls: tuple
    records: tuple
    safety_threshold: float
    ego: int

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.states.shape[0])

    @property
    def modes(self) -> list[str]:
        return [r.mode for r in self.records]

    @property
    def wall_times(self) -> np.ndarray:
        return np.array([r.wall_time for r in self.records])

    def switch_count(self) -> int:
        """Number of nominal-to-safety transitions between consecutive invocations."""
        m = self.modes
        return sum(1 for a, b in zip(m, m[1:]) if a == NOMINAL and b == SAFETY)

    def mode_consistent(self) -> bool:
        """Every non-degraded record's mode agrees with its value/threshold test."""
        for r in self.records:
            if r.degraded:
                continue
            expected = SAFETY if r.safety_value > self.safety_threshold else NOMINAL
            if r.mode != expected:
                return False
        return True

    def executed(self) -> OperatingPoint:
        return OperatingPoint(self.states, self.controls)

    def min_separation(self, system: MultiPlayerSystem, players: Sequence[int] | None = None) -> float:
        """Smallest distance between the ego and any other listed player."""
        others = [j for j in (players if players is not None else range(system.num_players)) if j != self.ego]
        e = list(system.position_indices(self.ego))
        return float(
            min(np.linalg.norm(self.states[:, e] - self.states[:, list(system.position_indices(j))], axis=1).min() for j in others)
        )


def shift_warm_start(previous: SolveResult, steps: int, system: MultiPlayerSystem) -> tuple:
    """Advance a solution by ``steps`` timesteps for use as a warm start.

    The first ``steps`` entries are dropped and the tail is padded by
    repeating the final strategy entry (and final control), with the
    reference states rolled forward through ``system``.
    """
    op = previous.operating_point
    T = op.horizon
    if not 0 <= steps < T:
        raise ValueError(f"steps must lie in [0, {T}), got {steps}")
    if steps == 0:
        return tuple(previous.strategies), op
    strategies = []
    for s in previous.strategies:
        Ps = np.concatenate([s.Ps[steps:], np.repeat(s.Ps[-1:], steps, axis=0)])
        alphas = np.concatenate([s.alphas[steps:], np.repeat(s.alphas[-1:], steps, axis=0)])
        strategies.append(AffineStrategy(Ps, alphas))
    us = [np.concatenate([u[steps:], np.repeat(u[-1:], steps, axis=0)]) for u in op.us]
    xs = np.empty_like(op.xs)
    xs[: T + 1 - steps] = op.xs[steps:]
    for t in range(T - steps, T):
        xs[t + 1] = system.step(xs[t], [u[t] for u in us], t)
    return tuple(strategies), OperatingPoint(xs, tuple(us), consistent=True)


@dataclass
class _Plan:
    """Strategies being executed, each with its own reference trajectory."""

    strategies: list
    references: list
    start: int
    mode: str

    def controls(self, system, x, step):
        out = []
        for i, (s, ref) in enumerate(zip(self.strategies, self.references)):
            k = min(step - self.start, s.horizon - 1)
            out.append(ref.us[i][k] - s.Ps[k] @ (x - ref.xs[k]) - s.alphas[k])
        return out


def _usable(res: SolveResult | None) -> bool:
    return res is not None and res.status in ("converged", "max_iterations")


def _solve_once(system, costs, x, T, config, warm):
    try:
        res = solve(system, costs, x, T, config, warm)
    except LQConditioningError as err:
        return getattr(err, "partial", None), f"ill-conditioned: {err}"
    if not _usable(res):
        return res, f"solve ended with status {res.status}"
    return res, None


def _try_solve(system, costs, x, T, config, warm):
    """Solve from ``warm``; if that does not converge, retry from a cold start.

    Returns ``(result, failure message or None, whether the result is warm-started)``.
    The cold result replaces the warm one when it converges, or when the warm
    solve was not usable at all.
    """
    res, failure = _solve_once(system, costs, x, T, config, warm)
    if warm is None or (res is not None and res.converged):
        return res, failure, warm is not None
    cold, cold_failure = _solve_once(system, costs, x, T, config, None)
    if (cold is not None and cold.converged) or (failure is not None and cold_failure is None):
        return cold, cold_failure, False
    return res, failure, True


def _shifted(previous, system, step, T):
    """Warm start from ``previous = (result, solve step)`` advanced to ``step``, if still in range."""
    if previous is None:
        return None
    res, at = previous
    if not 0 <= step - at < T:
        return None
    return shift_warm_start(res, step - at, system)


def run_receding_horizon(
    system: MultiPlayerSystem,
    nominal_costs: Sequence[PlayerCost],
    safety_costs: Sequence[PlayerCost],
    x1,
    config: RecedingHorizonConfig,
    solver_config: SolverConfig | None = None,
    nominal_only: bool = False,
) -> ExecutionTrace:
    """Closed-loop run switching the ego between nominal and safety strategies.

    ``nominal_only=True`` never solves the safety game (the baseline run);
    the safety value is still evaluated and recorded, and the recorded mode
    is then always nominal.
    """
    solver_config = solver_config or SolverConfig()
    ego = config.ego
    if not 0 <= ego < system.num_players:
        raise ValueError(f"ego index {ego} out of range for {system.num_players} players")
    if len(nominal_costs) != system.num_players or len(safety_costs) != system.num_players:
        raise ValueError("need one nominal and one safety cost per player")
    if not safety_costs[ego].is_extremum:
        raise ValueError("the ego's safety cost must use max or min aggregation")
    T, k, invocations = config.schedule(system.dt)
    threshold = math.inf if nominal_only else config.safety_threshold

    x = np.asarray(x1, dtype=float)
    states = [x]
    controls = [[] for _ in range(system.num_players)]
    records = []
    prev_nominal = None
    prev_safety = None
    plan: _Plan | None = None
    step_index = 0

    for index in range(invocations):
        tic = time.perf_counter()
        warm = _shifted(prev_nominal, system, step_index, T) if config.warm_start else None
        nominal, failure, warm_used = _try_solve(system, nominal_costs, x, T, solver_config, warm)
        safety_res = None
        safety_value = math.nan
        mode = NOMINAL
        if failure is None:
            safety_value = costs_mod.evaluate(safety_costs[ego], nominal.operating_point, ego, relaxed=False)
            if safety_value > threshold:
                mode = SAFETY
                swarm = None
                if config.warm_start:
                    swarm = _shifted(prev_safety, system, step_index, T) or nominal.warm_start
                safety_res, failure, _ = _try_solve(system, safety_costs, x, T, solver_config, swarm)

        degraded = failure is not None
        if degraded:
            log.warning("invocation %d at t=%.2f: %s; holding previous plan", index, step_index * system.dt, failure)
            if plan is None:
                zero = [AffineStrategy.zeros(T, m, system.state_dim) for m in system.control_dims]
                ref = OperatingPoint(np.repeat(x[None], T + 1, axis=0), tuple(np.zeros((T, m)) for m in system.control_dims))
                plan = _Plan(zero, [ref] * system.num_players, step_index, NOMINAL)
            mode = plan.mode
        else:
            strategies = list(nominal.strategies)
            refs = [nominal.operating_point] * system.num_players
            if mode == SAFETY:
                strategies[ego] = safety_res.strategies[ego]
                refs[ego] = safety_res.operating_point
                prev_safety = (safety_res, step_index)
            plan = _Plan(strategies, refs, step_index, mode)
            prev_nominal = (nominal, step_index)
        wall = time.perf_counter() - tic

        records.append(
            InvocationRecord(
                index=index,
                step=step_index,
                time=step_index * system.dt,
                mode=mode,
                safety_value=float(safety_value),
                nominal_costs=tuple(nominal.unrelaxed_costs) if nominal is not None else (),
                safety_costs=tuple(safety_res.unrelaxed_costs) if safety_res is not None else None,
                nominal_converged=bool(nominal is not None and nominal.converged),
                safety_converged=None if safety_res is None else bool(safety_res.converged),
                nominal_iterations=nominal.iterations if nominal is not None else 0,
                safety_iterations=None if safety_res is None else safety_res.iterations,
                warm_started=warm_used,
                wall_time=wall,
                degraded=degraded,
                failure=failure,
            )
        )

        total_steps = _steps(config.total_duration, system.dt, "total_duration")
        for _ in range(min(k, total_steps - step_index)):
            us = plan.controls(system, x, step_index)
            x = system.step(x, us, step_index)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"executed state became non-finite at step {step_index + 1}")
            for i, u in enumerate(us):
                controls[i].append(u)
            states.append(x)
            step_index += 1

    return ExecutionTrace(
        dt=system.dt,
        states=np.array(states),
        controls=tuple(np.array(c).reshape(len(c), m) for c, m in zip(controls, system.control_dims)),
        records=tuple(records),
        safety_threshold=threshold,
        ego=ego,
    )


def resimulate(system: MultiPlayerSystem, trace: ExecutionTrace) -> OperatingPoint:
    """Re-run the recorded controls open loop from the recorded initial state."""
    return simulate(system, trace.states[0], trace.controls)
