import numpy as np
import pytest

from ilqreach.costs import QuadraticCostTerms
from ilqreach.dynamics import AffineStrategy, LinearizedDynamics
from ilqreach.lqgame import (
    LQConditioningError,
    feedback_pass,
    feedforward_pass,
    solve_lq_game,
    solve_lqr,
    stacked_control_terms,
)
from oracles import affine_lqr, best_response, random_lq_game, riccati_gains


def terms(Q, R, q=None, r=None):
    Q = np.asarray(Q, dtype=float)
    T = Q.shape[0] - 1
    n = Q.shape[1]
    R = tuple(np.asarray(Rj, dtype=float) for Rj in R)
    q = np.zeros((T + 1, n)) if q is None else np.asarray(q, dtype=float)
    r = tuple(np.zeros(Rj.shape[:2]) for Rj in R) if r is None else tuple(np.asarray(x, dtype=float) for x in r)
    return QuadraticCostTerms(Q, q, R, r)


def test_scalar_one_step_example():
    lin = LinearizedDynamics(np.ones((1, 1, 1)), (np.ones((1, 1, 1)),))
    # (x + u)^2 + u^2 = 0.5 * 2 x^2 + 0.5 * 2 u^2
    quad = terms([[[0.0]], [[2.0]]], [[[[2.0]]]])
    strat, _ = solve_lqr(lin, quad)
    assert strat.Ps[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert strat.alphas[0, 0] == 0.0


def test_zero_state_costs_give_zero_strategies():
    rng = np.random.default_rng(0)
    T, n, ms = 6, 3, [2, 1]
    lin = LinearizedDynamics(rng.normal(size=(T, n, n)), tuple(rng.normal(size=(T, n, m)) for m in ms))
    quads = []
    for i in range(2):
        R = [np.broadcast_to(np.eye(m), (T, m, m)) if j == i else np.zeros((T, m, m)) for j, m in enumerate(ms)]
        quads.append(terms(np.zeros((T + 1, n, n)), R))
    strategies, _ = solve_lq_game(lin, quads)
    for s in strategies:
        assert np.all(s.Ps == 0)
        assert np.all(s.alphas == 0)


def test_double_integrator_matches_textbook_riccati():
    dt, T = 0.1, 10
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt**2], [dt]])
    Q = np.zeros((T + 1, 2, 2))
    Q[T] = np.eye(2)
    R = np.broadcast_to(np.eye(1), (T, 1, 1))
    lin = LinearizedDynamics(np.broadcast_to(A, (T, 2, 2)), (np.broadcast_to(B, (T, 2, 1)),))
    strat, value = solve_lqr(lin, terms(Q, [R]))
    K, V = riccati_gains([A] * T, [B] * T, Q, R)
    np.testing.assert_allclose(strat.Ps, K, atol=1e-10)
    np.testing.assert_allclose(value.Z, V, atol=1e-10)


def test_terminal_value_equals_terminal_cost():
    rng = np.random.default_rng(1)
    lin, quads = random_lq_game(rng, 3, [2], 5)
    _, value = solve_lqr(lin, quads[0])
    np.testing.assert_array_equal(value.Z[-1], quads[0].Q[-1])
    np.testing.assert_array_equal(value.zeta[-1], quads[0].q[-1])


def test_single_player_game_equals_lqr_exactly():
    rng = np.random.default_rng(2)
    lin, quads = random_lq_game(rng, 4, [2], 8)
    (s1,), (v1,) = solve_lq_game(lin, quads)
    s2, v2 = solve_lqr(lin, quads[0])
    np.testing.assert_array_equal(s1.Ps, s2.Ps)
    np.testing.assert_array_equal(s1.alphas, s2.alphas)
    np.testing.assert_array_equal(v1.Z, v2.Z)


def test_lqr_with_linear_terms_matches_affine_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        lin, quads = random_lq_game(rng, 3, [2], 7)
        strat, _ = solve_lqr(lin, quads[0])
        K, k = best_response(lin, quads, [strat], 0)
        np.testing.assert_allclose(strat.Ps, K, atol=1e-9)
        np.testing.assert_allclose(strat.alphas, k, atol=1e-9)


def test_two_player_scalar_matches_iterated_best_response():
    rng = np.random.default_rng(4)
    T = 3
    for _ in range(5):
        a = rng.uniform(-0.9, 0.9)
        b1, b2 = rng.uniform(0.2, 1.0, size=2)
        As = np.full((T, 1, 1), a)
        lin = LinearizedDynamics(As, (np.full((T, 1, 1), b1), np.full((T, 1, 1), b2)))
        quads = []
        for i in range(2):
            Q = np.zeros((T + 1, 1, 1))
            Q[1:] = rng.uniform(0.1, 2.0, size=(T, 1, 1))
            R = [np.ones((T, 1, 1)) if j == i else np.zeros((T, 1, 1)) for j in range(2)]
            quads.append(terms(Q, R))
        strategies, _ = solve_lq_game(lin, quads)

        # Gauss-Seidel best-response iteration from zero strategies
        current = [AffineStrategy.zeros(T, 1, 1), AffineStrategy.zeros(T, 1, 1)]
        for _ in range(500):
            for i in range(2):
                K, k = best_response(lin, quads, current, i)
                current[i] = AffineStrategy(K, k)
        for s, c in zip(strategies, current):
            np.testing.assert_allclose(s.Ps, c.Ps, atol=1e-8)


@pytest.mark.parametrize("N", [2, 3])
def test_best_response_property(N):
    rng = np.random.default_rng(10 + N)
    for _ in range(15):
        n = int(rng.integers(1, 5))
        T = int(rng.integers(1, 11))
        ms = [int(rng.integers(1, 3)) for _ in range(N)]
        lin, quads = random_lq_game(rng, n, ms, T)
        strategies, values = solve_lq_game(lin, quads)
        for i in range(N):
            K, k = best_response(lin, quads, strategies, i)
            np.testing.assert_allclose(strategies[i].Ps, K, atol=1e-6)
            np.testing.assert_allclose(strategies[i].alphas, k, atol=1e-6)
        for v in values:
            for Z in v.Z:
                assert np.max(np.abs(Z - Z.T)) <= 1e-10


def test_decoupled_game_separates():
    rng = np.random.default_rng(5)
    T = 6
    A1, A2 = rng.normal(size=(2, 2)), rng.normal(size=(1, 1))
    A = np.zeros((3, 3))
    A[:2, :2], A[2:, 2:] = A1, A2
    B1 = np.zeros((3, 1))
    B1[:2] = rng.normal(size=(2, 1))
    B2 = np.zeros((3, 1))
    B2[2] = 1.0
    lin = LinearizedDynamics(np.broadcast_to(A, (T, 3, 3)), (np.broadcast_to(B1, (T, 3, 1)), np.broadcast_to(B2, (T, 3, 1))))
    Q1 = np.zeros((T + 1, 3, 3))
    Q1[1:, :2, :2] = np.eye(2)
    Q2 = np.zeros((T + 1, 3, 3))
    Q2[1:, 2, 2] = 3.0
    one = np.ones((T, 1, 1))
    zero = np.zeros((T, 1, 1))
    strategies, _ = solve_lq_game(lin, [terms(Q1, [one, zero]), terms(Q2, [zero, one])])
    K1, _ = riccati_gains([A1] * T, [B1[:2]] * T, Q1[:, :2, :2], one)
    K2, _ = riccati_gains([A2] * T, [B2[2:]] * T, Q2[:, 2:, 2:], one)
    np.testing.assert_allclose(strategies[0].Ps[:, :, :2], K1, atol=1e-12)
    np.testing.assert_allclose(strategies[1].Ps[:, :, 2:], K2, atol=1e-12)
    assert np.all(strategies[0].Ps[:, :, 2:] == 0)
    assert np.all(strategies[1].Ps[:, :, :2] == 0)


def test_singular_system_raises_with_timestep():
    T = 3
    lin = LinearizedDynamics(np.ones((T, 1, 1)), (np.zeros((T, 1, 1)),))
    quad = terms(np.ones((T + 1, 1, 1)), [np.zeros((T, 1, 1))])
    with pytest.raises(LQConditioningError) as info:
        solve_lqr(lin, quad)
    assert info.value.timestep == T - 1


def test_feedforward_pass_is_linear_in_gradients():
    rng = np.random.default_rng(6)
    lin, quads = random_lq_game(rng, 3, [1, 2], 5)
    fb = feedback_pass(lin, quads)
    _, r, _ = stacked_control_terms(quads, lin.control_dims)
    q = np.stack([qt.q for qt in quads])
    q2 = rng.normal(size=q.shape)
    r2 = rng.normal(size=r.shape)
    both, _ = feedforward_pass(fb, np.stack([q, q2], -1), np.stack([r, r2], -1))
    one, _ = feedforward_pass(fb, q[..., None], r[..., None])
    two, _ = feedforward_pass(fb, q2[..., None], r2[..., None])
    np.testing.assert_allclose(both[..., 0], one[..., 0], atol=1e-12)
    np.testing.assert_allclose(both[..., 1], two[..., 0], atol=1e-12)
    mix, _ = feedforward_pass(fb, (0.3 * q + 0.7 * q2)[..., None], (0.3 * r + 0.7 * r2)[..., None])
    np.testing.assert_allclose(mix[..., 0], 0.3 * one[..., 0] + 0.7 * two[..., 0], atol=1e-10)


def test_value_offsets_match_simulated_cost():
    """Value function at x0 equals the realized cost of the equilibrium from x0."""
    rng = np.random.default_rng(7)
    lin, quads = random_lq_game(rng, 2, [1, 1], 4)
    strategies, values = solve_lq_game(lin, quads)
    x = rng.normal(size=2)
    xs, us = [x], [[], []]
    for t in range(4):
        u = [-s.Ps[t] @ x - s.alphas[t] for s in strategies]
        for i in range(2):
            us[i].append(u[i])
        x = lin.As[t] @ x + sum(B[t] @ ui for B, ui in zip(lin.Bs, u))
        xs.append(x)
    for i, (qt, v) in enumerate(zip(quads, values)):
        cost = sum(0.5 * xs[t] @ qt.Q[t] @ xs[t] + qt.q[t] @ xs[t] for t in range(1, 5))
        cost += sum(0.5 * us[j][t] @ qt.R[j][t] @ us[j][t] + qt.r[j][t] @ us[j][t] for j in range(2) for t in range(4))
        predicted = 0.5 * xs[0] @ v.Z[0] @ xs[0] + v.zeta[0] @ xs[0] + v.offset[0]
        assert predicted == pytest.approx(cost, rel=1e-9, abs=1e-9)


def test_affine_oracle_sanity():
    """The oracle itself: scalar one-step problem with a linear term."""
    K, k = affine_lqr(
        [np.eye(1)], [np.eye(1)], [np.zeros(1)], np.array([[[0.0]], [[2.0]]]), np.array([[0.0], [1.0]]),
        [np.array([[2.0]])], [np.zeros(1)], [np.zeros((1, 1))], [np.zeros(1)],
    )
    # minimize (x+u)^2 + (x+u) + u^2: u = -(2x + 1) / 4
    assert K[0, 0, 0] == pytest.approx(0.5)
    assert k[0, 0] == pytest.approx(0.25)


def test_non_finite_system_raises_conditioning_error():
    T = 2
    lin = LinearizedDynamics(np.full((T, 1, 1), np.nan), (np.ones((T, 1, 1)),))
    quad = terms(np.ones((T + 1, 1, 1)), [np.ones((T, 1, 1))])
    with pytest.raises(LQConditioningError):
        solve_lqr(lin, quad)
