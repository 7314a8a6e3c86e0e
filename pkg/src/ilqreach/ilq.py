"""Iterative linear-quadratic solver for games with sum, max or min-over-time costs.

Each iteration linearizes the dynamics and quadraticizes every player's cost
about the current operating point (extremum costs only at their argmax/argmin
time), solves the resulting LQ game for a feedback Nash equilibrium, and
takes a backtracked step on the feedforward terms. With one player this is
ILQR on the same objective.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import costs as costs_mod
from .costs import PlayerCost
from .dynamics import (
    AffineStrategy,
    DivergenceError,
    MultiPlayerSystem,
    OperatingPoint,
    linearize,
    rollout,
    zero_control_rollout,
)
from .lqgame import (
    LQConditioningError,
    feedback_pass,
    feedforward_pass,
    solve_lq_game,
    split_strategies,
    stacked_control_terms,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 100
    convergence_tolerance: float = 1e-3
    initial_step: float = 1.0
    step_shrink: float = 0.5
    min_step: float = 1.0 / 64
    # accepted iterates may move any state coordinate by at most this much
    trust_region: float = 1.0
    # Expand max-over-time costs at several competing times when the
    # extremum is tied (see _ActiveTimes); False keeps the single-time rule.
    tie_handling: bool = True
    # how many recent argmax times stay candidates
    tie_window: int = 8
    epsilon: float | None = None
    epsilon_schedule: tuple | None = None
    # Also require each accepted step not to increase the objective that
    # the LQ model approximates. None enables it for single-player problems,
    # where that objective is a valid merit function; games have none.
    descent_check: bool | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.convergence_tolerance <= 0:
            raise ValueError("convergence_tolerance must be positive")
        if not 0 < self.initial_step <= 1:
            raise ValueError("initial_step must lie in (0, 1]")
        if not 0 < self.step_shrink < 1:
            raise ValueError("step_shrink must lie in (0, 1)")
        if not 0 < self.min_step <= self.initial_step:
            raise ValueError("min_step must lie in (0, initial_step]")
        if self.trust_region <= 0:
            raise ValueError("trust_region must be positive")
        if self.tie_window < 1:
            raise ValueError("tie_window must be positive")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.epsilon_schedule is not None:
            sched = tuple(float(e) for e in self.epsilon_schedule)
            if not sched or any(e <= 0 for e in sched):
                raise ValueError("epsilon_schedule entries must be positive")
            if any(b >= a for a, b in zip(sched, sched[1:])):
                raise ValueError("epsilon_schedule must be strictly decreasing")
            object.__setattr__(self, "epsilon_schedule", sched)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    step: float
    change: float
    relaxed_costs: tuple
    active_times: tuple
    tie_weights: tuple = ()


@dataclass(frozen=True)
class SolveResult:
    strategies: tuple
    operating_point: OperatingPoint
    relaxed_costs: tuple
    unrelaxed_costs: tuple
    iterations: int
    converged: bool
    wall_time: float
    status: str = "converged"
    epsilons: tuple = ()
    history: tuple = field(default=(), repr=False)

    @property
    def warm_start(self) -> tuple:
        return self.strategies, self.operating_point


def predicted_deviation(lin, strategies) -> np.ndarray:
    """State deviations of the linearized dynamics under a full step of ``strategies``."""
    T, n = lin.horizon, lin.state_dim
    dx = np.zeros((T + 1, n))
    for t in range(T):
        nxt = lin.As[t] @ dx[t]
        for B, s in zip(lin.Bs, strategies):
            nxt -= B[t] @ (s.Ps[t] @ dx[t] + s.alphas[t])
        dx[t + 1] = nxt
    return dx


class _ActiveTimes:
    """Quadratic models for one iteration, handling max-over-time ties.

    A max-over-time equilibrium often sits where several sample times attain
    the same cost. Expanding at a single time then cannot converge: the
    argmax alternates and the iterates chatter. Each max-over-time player
    therefore keeps a small set of competing times (its current argmax, the
    argmax times of recent iterations and the previous support) and is
    expanded at their convex combination with weights chosen so that the
    linearized costs of the supported times are equal after the step.
    Weights that come out negative drop their time from the support. This is
    a combination of one-sided derivatives, not a smoothing of the max; with
    a single supported time it is exactly the single-time expansion.

    Times are ranked by the state cost ``g`` alone: the quadratic model
    charges the control penalty at every step, so the objective it
    linearizes is ``max_t g_t + 0.5 * epsilon * sum_t ||u_t||^2``.
    """

    def __init__(self, costs, enabled: bool = True, window: int = 8):
        self.costs = costs
        self.enabled = enabled
        self.window = window
        n = len(costs)
        self.recent = [[] for _ in range(n)]
        self.support = [{} for _ in range(n)]

    def _argmax(self, i, cost, op):
        # Without tie handling the default expansion time of quadraticize
        # (argmax of the relaxed per-time cost) is used unchanged.
        if not (self.enabled and cost.is_extremum):
            return None
        vals = costs_mod.per_time_values(cost, op, i, relaxed=False)
        return costs_mod.extremum_index(vals, cost.aggregation) + 1

    @staticmethod
    def _solve_weights(supp, cols, col_of, base, D):
        live = [(i, k) for i in supp for k in supp[i]]
        index = {ik: j for j, ik in enumerate(live)}
        sel = [col_of[ik] for ik in live]
        rows, rhs = [], []
        for i, times in supp.items():
            row = np.zeros(len(live))
            for k in times:
                row[index[i, k]] = 1.0
            rows.append(row)
            rhs.append(1.0)
            for k in times[1:]:
                rows.append(D[i, times[0]][sel] - D[i, k][sel])
                rhs.append(base[i, k] - base[i, times[0]])
        w = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
        return w, index

    def step(self, lin, op):
        costs = self.costs
        N = len(costs)
        primary_t = [self._argmax(i, c, op) for i, c in enumerate(costs)]
        primary = [costs_mod.quadraticize(c, op, i, at=primary_t[i]) for i, c in enumerate(costs)]
        active = tuple(q.active_time for q in primary)
        cands = {}
        for i, c in enumerate(costs):
            a = primary_t[i]
            if not (self.enabled and c.aggregation == "max"):
                continue
            times = {a} | set(self.recent[i]) | set(self.support[i])
            self.recent[i] = (self.recent[i] + [a])[-self.window :]
            if len(times) > 1:
                cands[i] = sorted(times)
            else:
                self.support[i] = {}
        if not cands:
            strategies, _ = solve_lq_game(lin, primary)
            return strategies, active, ()

        pieces = {(i, k): costs_mod.quadraticize(costs[i], op, i, at=k) for i in cands for k in cands[i]}
        # Hessians for the gains use the previous weights (uniform for new sets).
        model = list(primary)
        for i, times in cands.items():
            prev = self.support[i]
            w = np.array([prev.get(k, 0.0) for k in times])
            w = w / w.sum() if w.sum() > 0 else np.full(len(times), 1.0 / len(times))
            Q = sum(wk * pieces[i, k].Q for wk, k in zip(w, times))
            model[i] = replace(primary[i], Q=Q)
        fb = feedback_pass(lin, model)
        _, r, _ = stacked_control_terms(model, lin.control_dims)
        T, n = lin.horizon, lin.state_dim
        cols = [(i, k) for i in cands for k in cands[i]]
        K = 1 + len(cols)
        q = np.zeros((N, T + 1, n, K))
        rr = np.zeros(r.shape + (K,))
        rr[..., 0] = r
        for i in range(N):
            if i not in cands:
                q[i, :, :, 0] = primary[i].q
        for c_idx, (i, k) in enumerate(cols, start=1):
            q[i, :, :, c_idx] = pieces[i, k].q
        alphas, _ = feedforward_pass(fb, q, rr)
        dx = np.zeros((T + 1, n, K))
        for t in range(T):
            dx[t + 1] = fb.F[t] @ dx[t] - fb.B[t] @ alphas[t]

        # Predicted piece value = base + D @ w over the column weights.
        base = {}
        D = {}
        for i, k in cols:
            grad = pieces[i, k].q[k]
            base[i, k] = costs[i].instantaneous.value(op.xs[k]) + grad @ dx[k, :, 0]
            D[i, k] = grad @ dx[k, :, 1:]
        col_of = {ik: j for j, ik in enumerate(cols)}
        # Start from the argmax alone and run a small active-set loop: drop
        # the most negative weight, otherwise add the candidate predicted
        # furthest above its player's level.
        supp = {i: [primary_t[i]] for i in cands}
        seen = set()
        for _ in range(4 * len(cols)):
            key = tuple((i, tuple(v)) for i, v in sorted(supp.items()))
            if key in seen:
                break
            seen.add(key)
            w, index = self._solve_weights(supp, cols, col_of, base, D)
            full = np.zeros(len(cols))
            for ik, j in index.items():
                full[col_of[ik]] = w[j]
            worst = None
            for i, times in supp.items():
                if len(times) < 2:
                    continue
                vals = [w[index[i, k]] for k in times]
                j = int(np.argmin(vals))
                if vals[j] < -1e-12 and (worst is None or vals[j] < worst[0]):
                    worst = (vals[j], i, times[j])
            if worst is not None:
                supp[worst[1]].remove(worst[2])
                continue
            best = None
            for i, times in supp.items():
                level = base[i, times[0]] + D[i, times[0]] @ full
                for k in cands[i]:
                    if k in times:
                        continue
                    excess = base[i, k] + D[i, k] @ full - level
                    if excess > 1e-12 and (best is None or excess > best[0]):
                        best = (excess, i, k)
            if best is None:
                break
            supp[best[1]].append(best[2])
            supp[best[1]].sort()

        weights = np.maximum(full, 0.0)
        total = alphas[..., 0] + alphas[..., 1:] @ weights
        strategies = split_strategies(fb, total)
        record = []
        for i in cands:
            self.support[i] = {k: float(weights[col_of[i, k]]) for k in supp[i]}
            record.append((i, tuple(sorted(self.support[i].items()))))
        return strategies, active, tuple(record)


def _resolve_costs(costs: Sequence[PlayerCost], config: SolverConfig) -> list[PlayerCost]:
    if config.epsilon is not None:
        costs = [c.with_epsilon(config.epsilon) for c in costs]
    for i, c in enumerate(costs):
        if c.epsilon <= 0:
            raise ValueError(f"player {i} cost needs epsilon > 0 for a game solve")
    return list(costs)


def _objectives(costs, op):
    relaxed = tuple(costs_mod.evaluate(c, op, i) for i, c in enumerate(costs))
    plain = tuple(costs_mod.evaluate(c, op, i, relaxed=False) for i, c in enumerate(costs))
    return relaxed, plain


def _change(a: OperatingPoint, b: OperatingPoint) -> float:
    return float(np.max(np.abs(a.xs - b.xs)))


def _zero_strategies(system: MultiPlayerSystem, horizon: int) -> list[AffineStrategy]:
    return [AffineStrategy.zeros(horizon, m, system.state_dim) for m in system.control_dims]


def _rebase(strategies: Sequence[AffineStrategy]) -> tuple:
    # Feedforwards expressed about the accepted operating point vanish.
    return tuple(AffineStrategy(s.Ps, np.zeros_like(s.alphas)) for s in strategies)


def initial_operating_point(system, x1, horizon, warm_start=None):
    if warm_start is None:
        return zero_control_rollout(system, x1, horizon)
    strategies, reference = warm_start
    if reference.horizon != horizon:
        raise ValueError(f"warm start horizon {reference.horizon} differs from {horizon}")
    return rollout(system, x1, strategies, reference)


def solve(
    system: MultiPlayerSystem,
    costs: Sequence[PlayerCost],
    x1,
    horizon: int,
    config: SolverConfig | None = None,
    warm_start: tuple | None = None,
) -> SolveResult:
    """Approximate local feedback Nash equilibrium from initial state ``x1``.

    ``warm_start`` is ``(strategies, operating_point)``, typically
    ``previous_result.warm_start`` or the output of
    :func:`ilqreach.safety.shift_warm_start`.

    Raises :class:`LQConditioningError` (with ``iteration`` and ``partial``
    attributes) when an LQ subproblem is ill-conditioned. A non-finite
    rollout at the smallest step ends the solve with ``status="diverged"``
    and the last finite iterate.
    """
    config = config or SolverConfig()
    if config.epsilon_schedule:
        results = epsilon_sweep(system, costs, x1, horizon, config.epsilon_schedule, config, warm_start)
        last = results[-1]
        return replace(
            last,
            iterations=sum(r.iterations for r in results),
            wall_time=sum(r.wall_time for r in results),
        )

    start = time.perf_counter()
    costs = _resolve_costs(costs, config)
    if len(costs) != system.num_players:
        raise ValueError(f"got {len(costs)} costs for {system.num_players} players")
    x1 = np.asarray(x1, dtype=float)
    if x1.shape != (system.state_dim,):
        raise ValueError(f"initial state has shape {x1.shape}, expected ({system.state_dim},)")

    try:
        op = initial_operating_point(system, x1, horizon, warm_start)
        strategies = _rebase(warm_start[0]) if warm_start is not None else tuple(_zero_strategies(system, horizon))
    except DivergenceError:
        log.warning("warm start diverged; falling back to a cold start")
        op = zero_control_rollout(system, x1, horizon)
        strategies = tuple(_zero_strategies(system, horizon))

    history = []
    converged = False
    status = "max_iterations"
    iteration = 0
    eps = tuple(c.epsilon for c in costs)
    ties = _ActiveTimes(costs, config.tie_handling, config.tie_window)

    def result(status_, converged_):
        relaxed, plain = _objectives(costs, op)
        return SolveResult(
            strategies=strategies,
            operating_point=op,
            relaxed_costs=relaxed,
            unrelaxed_costs=plain,
            iterations=iteration,
            converged=converged_,
            wall_time=time.perf_counter() - start,
            status=status_,
            epsilons=eps,
            history=tuple(history),
        )

    check_descent = config.descent_check if config.descent_check is not None else system.num_players == 1

    def merit(point):
        return costs_mod.surrogate_value(costs[0], point, 0)

    for iteration in range(1, config.max_iterations + 1):
        lin = linearize(system, op)
        try:
            lq_strategies, active, weights = ties.step(lin, op)
        except LQConditioningError as err:
            err.iteration = iteration
            err.partial = result("ill_conditioned", False)
            raise

        step = config.initial_step
        accepted = None
        diverged = False
        current = None
        while step >= config.min_step * (1 - 1e-12):
            try:
                candidate = rollout(system, x1, [s.scaled(step) for s in lq_strategies], op)
            except DivergenceError:
                diverged = True
                step *= config.step_shrink
                continue
            diverged = False
            change = _change(candidate, op)
            if change <= config.trust_region:
                if not check_descent or change < config.convergence_tolerance:
                    accepted = candidate
                    break
                current = merit(op) if current is None else current
                if merit(candidate) <= current + 1e-12 * max(1.0, abs(current)):
                    accepted = candidate
                    break
            step *= config.step_shrink

        if accepted is None:
            status = "diverged" if diverged else "step_rejected"
            log.debug("iteration %d: no acceptable step (%s)", iteration, status)
            iteration -= 1
            return result(status, False)

        change = _change(accepted, op)
        op = accepted
        strategies = _rebase(lq_strategies)
        history.append(
            IterationRecord(
                iteration=iteration,
                step=step,
                change=change,
                relaxed_costs=tuple(costs_mod.evaluate(c, op, i) for i, c in enumerate(costs)),
                active_times=active,
                tie_weights=weights,
            )
        )
        if change < config.convergence_tolerance:
            converged = True
            status = "converged"
            break

    return result(status, converged)


def epsilon_sweep(
    system: MultiPlayerSystem,
    costs: Sequence[PlayerCost],
    x1,
    horizon: int,
    epsilons: Sequence[float],
    config: SolverConfig | None = None,
    warm_start: tuple | None = None,
) -> list[SolveResult]:
    """Solve at each ``epsilon`` in turn, warm-starting from the previous solve.

    A failed solve is recorded (``converged=False``) and the next one starts cold.
    """
    config = config or SolverConfig()
    epsilons = [float(e) for e in epsilons]
    if not epsilons or any(e <= 0 for e in epsilons):
        raise ValueError("epsilons must be positive")
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError("epsilons must be strictly decreasing")
    base = replace(config, epsilon_schedule=None)
    results = []
    ws = warm_start
    for eps in epsilons:
        try:
            res = solve(system, costs, x1, horizon, replace(base, epsilon=eps), warm_start=ws)
        except LQConditioningError as err:
            log.warning("sweep solve at epsilon=%g failed: %s", eps, err)
            res = replace(err.partial, status=f"ill_conditioned: {err}")
            results.append(res)
            ws = None
            continue
        results.append(res)
        ws = res.warm_start if res.status in ("converged", "max_iterations") else None
    return results


@dataclass(frozen=True)
class NashReport:
    fractions: tuple
    best_improvements: tuple
    perturbation_count: int
    radius: float

    @property
    def is_local_nash(self) -> bool:
        return all(f == 0 for f in self.fractions)


def verify_local_nash(
    result: SolveResult,
    system: MultiPlayerSystem,
    costs: Sequence[PlayerCost],
    perturbation_count: int = 50,
    radius: float = 1e-3,
    rng: np.random.Generator | int | None = 0,
    threshold: float = 1e-6,
    x1=None,
    objective: str = "surrogate",
) -> NashReport:
    """Probe unilateral deviations of each player's feedforward sequence.

    For player ``i``, random perturbations with infinity norm at most
    ``radius`` are added to its feedforward terms while every other player
    keeps its feedback strategy. Reports per player the fraction of
    perturbations lowering that player's relaxed objective by more than
    ``threshold``.
    """
    rng = np.random.default_rng(rng)
    op = result.operating_point
    if result.epsilons:
        costs = [c.with_epsilon(e) for c, e in zip(costs, result.epsilons)]
    x1 = op.xs[0] if x1 is None else np.asarray(x1, dtype=float)
    if objective == "surrogate":
        value = costs_mod.surrogate_value
    elif objective == "relaxed":
        value = costs_mod.evaluate
    else:
        raise ValueError(f"unknown objective {objective!r}")
    base = [value(c, op, i) for i, c in enumerate(costs)]
    fractions, best = [], []
    for i, s in enumerate(result.strategies):
        wins = 0
        top = 0.0
        for _ in range(perturbation_count):
            delta = rng.uniform(-radius, radius, size=s.alphas.shape)
            trial = list(result.strategies)
            trial[i] = AffineStrategy(s.Ps, s.alphas + delta)
            try:
                new_op = rollout(system, x1, trial, op)
            except DivergenceError:
                continue
            gain = base[i] - value(costs[i], new_op, i)
            top = max(top, gain)
            if gain > threshold:
                wins += 1
        fractions.append(wins / perturbation_count if perturbation_count else 0.0)
        best.append(top)
    return NashReport(tuple(fractions), tuple(best), perturbation_count, radius)
