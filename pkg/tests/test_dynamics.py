import numpy as np
import pytest

from ilqreach.dynamics import (
    AffineStrategy,
    Bicycle,
    DimensionError,
    DivergenceError,
    LinearSystem,
    MultiPlayerSystem,
    OperatingPoint,
    ProductSystem,
    Quadrotor14,
    Unicycle,
    dynamics_residual,
    linearize,
    rollout,
    simulate,
    step,
    zero_control_rollout,
)

MODELS = [Bicycle(4.0), Unicycle(), Quadrotor14(mass=1.3, inertia_x=0.7, inertia_y=0.9, inertia_z=1.4)]


def random_state(model, rng):
    x = rng.normal(size=model.state_dim)
    if isinstance(model, Bicycle):
        x[3] = rng.uniform(-1.0, 1.0)  # keep the steer angle away from tan singularities
    if isinstance(model, Quadrotor14):
        x[4:6] = rng.uniform(-1.0, 1.0, size=2)
    return x


def single(model, dt=0.1):
    return ProductSystem([model], dt)


def test_bicycle_step_straight():
    sys = single(Bicycle(4.0))
    x = step(sys, np.array([0.0, 0.0, 0.0, 0.0, 1.0]), [np.zeros(2)])
    np.testing.assert_allclose(x, [0.1, 0.0, 0.0, 0.0, 1.0], atol=1e-15)


def test_unicycle_step_heading_up():
    sys = single(Unicycle())
    x = step(sys, np.array([0.0, 0.0, np.pi / 2, 2.0]), [np.zeros(2)])
    np.testing.assert_allclose(x, [0.0, 0.2, np.pi / 2, 2.0], atol=1e-15)


def test_quadrotor_hover_is_equilibrium_of_vertical_velocity():
    mass = 1.7
    model = Quadrotor14(mass=mass)
    x = np.zeros(14)
    x[9] = 9.81 * mass
    xdot = model.f(x, np.zeros(4))
    assert xdot[8] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(xdot, 0.0, atol=1e-12)
    nxt = step(single(model), x, [np.zeros(4)])
    np.testing.assert_allclose(nxt, x, atol=1e-12)


def test_default_gravity():
    assert Quadrotor14().gravity == 9.81


def test_linear_model_linearization_is_exact():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    B1, B2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 1))
    sys = LinearSystem(A, [B1, B2])
    op = simulate(sys, rng.normal(size=3), [rng.normal(size=(4, 2)), rng.normal(size=(4, 1))])
    lin = linearize(sys, op)
    for t in range(4):
        np.testing.assert_array_equal(lin.As[t], A)
        np.testing.assert_array_equal(lin.Bs[0][t], B1)
        np.testing.assert_array_equal(lin.Bs[1][t], B2)


def test_bicycle_heading_derivative():
    sys = single(Bicycle(4.0))
    op = OperatingPoint(np.array([[0, 0, 0, 0, 1.0], [0.1, 0, 0, 0, 1.0]]), (np.zeros((1, 2)),))
    lin = linearize(sys, op)
    assert lin.As[0][1, 2] == pytest.approx(0.1, abs=1e-15)


def _central_jacobian(model, x, u, h=1e-6):
    n, m = x.size, u.size
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    for k in range(n):
        d = np.zeros(n)
        d[k] = h
        A[:, k] = (model.f(x + d, u) - model.f(x - d, u)) / (2 * h)
    for k in range(m):
        d = np.zeros(m)
        d[k] = h
        B[:, k] = (model.f(x, u + d) - model.f(x, u - d)) / (2 * h)
    return A, B


@pytest.mark.parametrize("model", MODELS, ids=lambda m: type(m).__name__)
def test_analytic_jacobians_match_finite_differences(model):
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = random_state(model, rng)
        u = rng.normal(size=model.control_dim)
        A, B = model.jacobians(x, u)
        A_fd, B_fd = _central_jacobian(model, x, u)
        np.testing.assert_allclose(A, A_fd, atol=1e-5)
        np.testing.assert_allclose(B, B_fd, atol=1e-5)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: type(m).__name__)
def test_euler_step_converges_to_vector_field(model):
    rng = np.random.default_rng(2)
    x = random_state(model, rng)
    u = rng.normal(size=model.control_dim)
    exact = model.f(x, u)
    errors = []
    for dt in (1e-2, 1e-3, 1e-4):
        sys = single(model, dt)
        errors.append(np.max(np.abs((sys.step(x, [u]) - x) / dt - exact)))
    # explicit Euler reproduces the vector field up to rounding
    assert max(errors) < 1e-8


class _FDOnly(MultiPlayerSystem):
    """Same dynamics as a product system but without analytic Jacobians."""

    def __init__(self, inner):
        self.inner = inner
        self.state_dim = inner.state_dim
        self.control_dims = inner.control_dims
        self.dt = inner.dt

    def step(self, x, us, t=0):
        return self.inner.step(x, us, t)


def test_finite_difference_fallback_matches_analytic():
    rng = np.random.default_rng(3)
    sys = ProductSystem([Bicycle(3.0), Unicycle()], 0.1)
    fd = _FDOnly(sys)
    xs = np.concatenate([random_state(Bicycle(3.0), rng), random_state(Unicycle(), rng)])[None]
    us = [rng.normal(size=(1, 2)), rng.normal(size=(1, 2))]
    A, Bs = sys.jacobians(xs, us)
    A2, Bs2 = fd.jacobians(xs, us)
    np.testing.assert_allclose(A, A2, atol=1e-6)
    for B, B2 in zip(Bs, Bs2):
        np.testing.assert_allclose(B, B2, atol=1e-6)


def test_product_system_block_structure():
    rng = np.random.default_rng(4)
    models = [Bicycle(4.0), Unicycle(), Bicycle(2.0)]
    sys = ProductSystem(models, 0.1)
    assert sys.state_dim == sum(m.state_dim for m in models)
    x = np.concatenate([random_state(m, rng) for m in models])
    us = [rng.normal(size=(1, m.control_dim)) for m in models]
    A, Bs = sys.jacobians(x[None], us)
    for i in range(3):
        si = sys.player_state_slice(i)
        for j in range(3):
            if i != j:
                assert np.all(A[0][si, sys.player_state_slice(j)] == 0)
        mask = np.ones(sys.state_dim, bool)
        mask[si] = False
        assert np.all(Bs[i][0][mask] == 0)
        assert np.any(Bs[i][0][si] != 0)


def test_dimension_mismatch_names_player():
    sys = ProductSystem([Bicycle(), Unicycle()], 0.1)
    with pytest.raises(DimensionError, match="player 1"):
        sys.step(np.zeros(9), [np.zeros(2), np.zeros(3)])
    with pytest.raises(DimensionError, match="state"):
        sys.step(np.zeros(8), [np.zeros(2), np.zeros(2)])


def test_rollout_zero_strategy_reproduces_reference():
    rng = np.random.default_rng(5)
    sys = ProductSystem([Bicycle(), Unicycle()], 0.1)
    x1 = np.concatenate([random_state(Bicycle(), rng), random_state(Unicycle(), rng)])
    ref = simulate(sys, x1, [rng.normal(size=(6, 2)), rng.normal(size=(6, 2))])
    out = rollout(sys, x1, [AffineStrategy.zeros(6, 2, 9)] * 2, ref)
    np.testing.assert_array_equal(out.xs, ref.xs)
    assert out.consistent


def test_rollout_deadbeat_scalar():
    sys = LinearSystem([[1.0]], [[[1.0]]])
    ref = OperatingPoint(np.zeros((5, 1)), (np.zeros((4, 1)),))
    strat = AffineStrategy(np.ones((4, 1, 1)), np.zeros((4, 1)))
    out = rollout(sys, np.array([1.0]), [strat], ref)
    np.testing.assert_array_equal(out.xs.ravel(), [1, 0, 0, 0, 0])
    np.testing.assert_array_equal(out.us[0].ravel(), [-1, 0, 0, 0])


def test_rollout_divergence_reports_timestep():
    sys = LinearSystem([[1e200]], [[[1.0]]])
    ref = OperatingPoint(np.zeros((4, 1)), (np.zeros((3, 1)),))
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore"):
        rollout(sys, np.array([1e200]), [AffineStrategy.zeros(3, 1, 1)], ref)
    assert info.value.timestep == 1


def test_rollout_is_dynamically_consistent():
    rng = np.random.default_rng(6)
    sys = ProductSystem([Bicycle(4.0)] * 3, 0.1)
    x1 = np.concatenate([random_state(Bicycle(4.0), rng) for _ in range(3)])
    ref = zero_control_rollout(sys, x1, 20)
    strategies = [AffineStrategy(0.01 * rng.normal(size=(20, 2, 15)), 0.1 * rng.normal(size=(20, 2))) for _ in range(3)]
    out = rollout(sys, x1 + 0.01, strategies, ref)
    assert out.consistent
    assert dynamics_residual(sys, out) < 1e-12


def test_operating_point_is_immutable():
    op = OperatingPoint(np.zeros((3, 2)), (np.zeros((2, 1)),))
    with pytest.raises(ValueError):
        op.xs[0, 0] = 1.0


def test_strategy_rejects_non_finite():
    with pytest.raises(ValueError):
        AffineStrategy(np.full((2, 1, 1), np.nan), np.zeros((2, 1)))
