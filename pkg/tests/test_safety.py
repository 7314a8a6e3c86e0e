import numpy as np
import pytest

import ilqreach.safety as safety
from ilqreach.costs import PlayerCost, ProximityAvoid, QuadraticTracking
from ilqreach.dynamics import LinearSystem, ProductSystem, Unicycle
from ilqreach.ilq import SolverConfig, solve
from ilqreach.lqgame import LQConditioningError
from ilqreach.safety import (
    NOMINAL,
    SAFETY,
    RecedingHorizonConfig,
    resimulate,
    run_receding_horizon,
    shift_warm_start,
)


def stationary_problem():
    """Deadbeat scalar system: gains and feedforwards are constant in time."""
    system = LinearSystem([[0.0]], [[[1.0]]])
    cost = PlayerCost(QuadraticTracking((0,), (1.0,), (1.0,)), "sum", 0.1)
    return system, [cost], np.array([0.3]), 6


def test_shift_zero_steps_is_identity():
    system, costs, x1, T = stationary_problem()
    res = solve(system, costs, x1, T)
    strategies, op = shift_warm_start(res, 0, system)
    assert op is res.operating_point
    assert strategies[0] is res.strategies[0]


def test_shift_last_step_pads_with_final_entry():
    rng = np.random.default_rng(0)
    system = ProductSystem([Unicycle()], 0.1)
    cost = PlayerCost(QuadraticTracking((0, 1, 3), (2.0, 1.0, 1.0), (1.0, 1.0, 0.5)), "sum", 1.0)
    T = 8
    res = solve(system, [cost], np.r_[rng.normal(size=2), 0.3, 0.5], T)
    strategies, op = shift_warm_start(res, T - 1, system)
    s, old = strategies[0], res.strategies[0]
    assert s.horizon == T
    for t in range(T):
        np.testing.assert_array_equal(s.Ps[t], old.Ps[-1])
        np.testing.assert_array_equal(s.alphas[t], old.alphas[-1])
    np.testing.assert_array_equal(op.xs[:2], res.operating_point.xs[T - 1 :])
    # padded states follow the dynamics under the repeated control
    for t in range(1, T):
        np.testing.assert_allclose(op.xs[t + 1], system.step(op.xs[t], [op.us[0][t]], t), atol=1e-14)


@pytest.mark.parametrize("steps", [-1, 6, 7])
def test_shift_rejects_out_of_range_steps(steps):
    system, costs, x1, T = stationary_problem()
    res = solve(system, costs, x1, T)
    with pytest.raises(ValueError):
        shift_warm_start(res, steps, system)


def test_stationary_shift_reconverges_quickly():
    system, costs, x1, T = stationary_problem()
    res = solve(system, costs, x1, T, SolverConfig(convergence_tolerance=1e-8))
    assert res.converged
    s = res.strategies[0]
    np.testing.assert_allclose(s.Ps, np.broadcast_to(s.Ps[:1], s.Ps.shape), atol=1e-12)
    np.testing.assert_allclose(s.alphas, np.broadcast_to(s.alphas[:1], s.alphas.shape), atol=1e-12)
    for steps in (1, 3, T - 1):
        warm = shift_warm_start(res, steps, system)
        again = solve(system, costs, res.operating_point.xs[steps], T, SolverConfig(convergence_tolerance=1e-8), warm)
        assert again.converged
        assert again.iterations <= 2


def two_unicycles(distance):
    system = ProductSystem([Unicycle(), Unicycle()], 0.1)
    x1 = np.array([0.0, 0.0, 0.0, 0.0, distance, 0.0, np.pi, 0.0])
    # nominal: hold still (zero speed is already optimal)
    nominal = [PlayerCost(QuadraticTracking((4 * i + 3,), (0.0,), (1.0,)), "sum", 1.0) for i in range(2)]
    P = [system.position_indices(i) for i in range(2)]
    safety_costs = [PlayerCost(ProximityAvoid(5.0, P[i], (P[1 - i],)), "max", 1.0) for i in range(2)]
    return system, nominal, safety_costs, x1


@pytest.mark.parametrize("distance, value, mode", [(8.0, -3.0, NOMINAL), (2.0, 3.0, SAFETY)])
def test_mode_follows_threshold(distance, value, mode):
    system, nominal, safety_costs, x1 = two_unicycles(distance)
    config = RecedingHorizonConfig(total_duration=0.3, planning_horizon=0.5, replan_interval=0.1)
    trace = run_receding_horizon(system, nominal, safety_costs, x1, config)
    first = trace.records[0]
    assert first.safety_value == pytest.approx(value, abs=1e-9)
    assert first.mode == mode
    assert trace.mode_consistent()
    assert len(trace.records) == 3
    assert trace.states.shape == (4, 8)


def test_nominal_only_never_switches():
    system, nominal, safety_costs, x1 = two_unicycles(2.0)
    config = RecedingHorizonConfig(total_duration=0.3, planning_horizon=0.5)
    trace = run_receding_horizon(system, nominal, safety_costs, x1, config, nominal_only=True)
    assert trace.modes == [NOMINAL] * 3
    assert all(r.safety_value > 0 for r in trace.records)
    assert trace.switch_count() == 0


def test_safety_mode_improves_separation():
    # ego approaches at 3 m/s; the nominal plan brakes too gently
    system, nominal, safety_costs, x1 = two_unicycles(8.0)
    x1[3] = 3.0
    # a small relaxation keeps the control penalty from outweighing the proximity term
    safety_costs = [c.with_epsilon(0.01) for c in safety_costs]
    config = RecedingHorizonConfig(total_duration=2.0, planning_horizon=1.0)
    trace = run_receding_horizon(system, nominal, safety_costs, x1, config)
    baseline = run_receding_horizon(system, nominal, safety_costs, x1, config, nominal_only=True)
    assert SAFETY in trace.modes
    assert trace.switch_count() >= 1
    assert trace.min_separation(system) > baseline.min_separation(system)
    # the other agent keeps its nominal (stationary) plan
    np.testing.assert_allclose(trace.states[:, 4:6], np.broadcast_to(x1[4:6], (len(trace.states), 2)), atol=1e-9)


def test_executed_trajectory_resimulates():
    system, nominal, safety_costs, x1 = two_unicycles(3.0)
    x1[3] = 0.5
    config = RecedingHorizonConfig(total_duration=1.0, planning_horizon=0.8, replan_interval=0.2)
    trace = run_receding_horizon(system, nominal, safety_costs, x1, config)
    again = resimulate(system, trace)
    np.testing.assert_allclose(again.xs, trace.states, atol=1e-10)
    assert [r.step for r in trace.records] == [0, 2, 4, 6, 8]
    assert all(r.warm_started for r in trace.records[1:])
    assert not trace.records[0].warm_started


def test_solver_failure_is_marked_degraded(monkeypatch):
    system, nominal, safety_costs, x1 = two_unicycles(8.0)

    def failing(*args, **kwargs):
        raise LQConditioningError(0, float("inf"))

    monkeypatch.setattr(safety, "solve", failing)
    config = RecedingHorizonConfig(total_duration=0.3, planning_horizon=0.5)
    trace = run_receding_horizon(system, nominal, safety_costs, x1, config)
    assert all(r.degraded for r in trace.records)
    assert all("ill-conditioned" in r.failure for r in trace.records)
    assert trace.mode_consistent()
    # the fallback plan applies zero controls
    np.testing.assert_array_equal(trace.states, np.repeat(x1[None], 4, axis=0))


def test_ego_safety_cost_must_be_extremum():
    system, nominal, _, x1 = two_unicycles(8.0)
    config = RecedingHorizonConfig(total_duration=0.3, planning_horizon=0.5)
    with pytest.raises(ValueError, match="max or min"):
        run_receding_horizon(system, nominal, nominal, x1, config)


def test_schedule():
    assert RecedingHorizonConfig(4.0, 2.0, 0.1).schedule(0.1) == (20, 1, 40)
    assert RecedingHorizonConfig(1.0, 0.8, 0.3).schedule(0.1) == (8, 3, 4)
    with pytest.raises(ValueError, match="multiple"):
        RecedingHorizonConfig(1.0, 0.85).schedule(0.1)
    with pytest.raises(ValueError):
        RecedingHorizonConfig(1.0, 0.2, 0.3).schedule(0.1)
    with pytest.raises(ValueError):
        RecedingHorizonConfig(0.0)
