"""Discrete-time multi-player dynamics.

Continuous-time single-agent models (bicycle, unicycle, 14-state quadrotor) are
Euler-discretized and stacked into a :class:`ProductSystem`, one subsystem per
player. :class:`LinearSystem` covers exact discrete affine dynamics with any
number of players acting on a shared state.

Every system maps ``(x_t, [u_t^1, ..., u_t^N]) -> x_{t+1}``. Linearization is
analytic where a model provides Jacobians and central finite differences
otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

GRAVITY = 9.81


class DimensionError(ValueError):
    """Raised when a state or control vector has the wrong size."""


class DivergenceError(RuntimeError):
    """Raised when a rollout produces a non-finite state."""

    def __init__(self, timestep: int, message: str | None = None):
        self.timestep = timestep
        super().__init__(message or f"non-finite state at timestep {timestep}")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Trajectory containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OperatingPoint:
    """State trajectory ``xs`` (T+1 x n) and per-player controls ``us[i]`` (T x m_i)."""

    xs: np.ndarray
    us: tuple
    consistent: bool = False

    def __post_init__(self):
        object.__setattr__(self, "xs", _frozen(self.xs))
        us = tuple(_frozen(u) for u in self.us)
        object.__setattr__(self, "us", us)
        if self.xs.ndim != 2:
            raise DimensionError("states must be a (T+1, n) array")
        for i, u in enumerate(us):
            if u.ndim != 2 or u.shape[0] != self.xs.shape[0] - 1:
                raise DimensionError(
                    f"player {i} controls have shape {u.shape}, "
                    f"expected ({self.xs.shape[0] - 1}, m)"
                )

    @property
    def horizon(self) -> int:
        return self.xs.shape[0] - 1

    @property
    def num_players(self) -> int:
        return len(self.us)

    def controls_at(self, t: int) -> list[np.ndarray]:
        return [u[t] for u in self.us]


@dataclass(frozen=True)
class AffineStrategy:
    """Feedback law ``u_t = u_ref_t - P_t (x_t - x_ref_t) - alpha_t``.

    ``Ps`` has shape (T, m, n) and ``alphas`` shape (T, m).
    """

    Ps: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Ps", _frozen(self.Ps))
        object.__setattr__(self, "alphas", _frozen(self.alphas))
        if self.Ps.ndim != 3 or self.alphas.ndim != 2:
            raise DimensionError("gains must be (T, m, n) and feedforwards (T, m)")
        if self.Ps.shape[:2] != self.alphas.shape:
            raise DimensionError(
                f"gain shape {self.Ps.shape} inconsistent with feedforward shape {self.alphas.shape}"
            )
        if not (np.all(np.isfinite(self.Ps)) and np.all(np.isfinite(self.alphas))):
            raise ValueError("strategy entries must be finite")

    @property
    def horizon(self) -> int:
        return self.Ps.shape[0]

    @classmethod
    def zeros(cls, horizon: int, control_dim: int, state_dim: int) -> "AffineStrategy":
        return cls(np.zeros((horizon, control_dim, state_dim)), np.zeros((horizon, control_dim)))

    def scaled(self, step: float) -> "AffineStrategy":
        """Same gains with feedforwards scaled by ``step``."""
        return AffineStrategy(self.Ps, step * self.alphas)


@dataclass(frozen=True)
class LinearizedDynamics:
    """Per-step Jacobians: ``As`` (T, n, n) and ``Bs[i]`` (T, n, m_i)."""

    As: np.ndarray
    Bs: tuple

    def __post_init__(self):
        object.__setattr__(self, "As", _frozen(self.As))
        object.__setattr__(self, "Bs", tuple(_frozen(B) for B in self.Bs))
        T, n, n2 = self.As.shape
        if n != n2:
            raise DimensionError("A matrices must be square")
        for i, B in enumerate(self.Bs):
            if B.shape[:2] != (T, n):
                raise DimensionError(f"B for player {i} has shape {B.shape}, expected ({T}, {n}, m)")

    @property
    def horizon(self) -> int:
        return self.As.shape[0]

    @property
    def state_dim(self) -> int:
        return self.As.shape[1]

    @property
    def control_dims(self) -> list[int]:
        return [B.shape[2] for B in self.Bs]


# ---------------------------------------------------------------------------
# Continuous-time single-agent models
# ---------------------------------------------------------------------------


class ContinuousModel:
    """Single-agent vector field ``xdot = f(x, u)``.

    ``f`` and ``jacobians`` accept arrays with arbitrary leading batch
    dimensions so a whole trajectory can be linearized in one call.
    """

    model_id = "continuous"
    state_dim: int
    control_dim: int
    position_indices: tuple = (0, 1)

    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, x, u):
        """Return ``(df/dx, df/du)``; defaults to central finite differences."""
        return _central_difference(self.f, x, u)

    def params(self) -> dict:
        return {}


@dataclass(frozen=True)
class Bicycle(ContinuousModel):
    """Kinematic bicycle, state ``(p_x, p_y, theta, phi, v)``, controls ``(omega, a)``.

    ``phi`` is the front-wheel angle and ``inter_axle`` the wheelbase in meters.
    """

    inter_axle: float = 4.0
    model_id = "bicycle"
    state_dim = 5
    control_dim = 2
    position_indices = (0, 1)

    def __post_init__(self):
        if self.inter_axle <= 0:
            raise ValueError("inter_axle must be positive")

    def f(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        theta, phi, v = x[..., 2], x[..., 3], x[..., 4]
        return np.stack(
            [
                v * np.cos(theta),
                v * np.sin(theta),
                v * np.tan(phi) / self.inter_axle,
                u[..., 0],
                u[..., 1],
            ],
            axis=-1,
        )

    def jacobians(self, x, u):
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        theta, phi, v = x[..., 2], x[..., 3], x[..., 4]
        fx = np.zeros(batch + (5, 5))
        fx[..., 0, 2] = -v * np.sin(theta)
        fx[..., 0, 4] = np.cos(theta)
        fx[..., 1, 2] = v * np.cos(theta)
        fx[..., 1, 4] = np.sin(theta)
        fx[..., 2, 3] = v / (np.cos(phi) ** 2 * self.inter_axle)
        fx[..., 2, 4] = np.tan(phi) / self.inter_axle
        fu = np.zeros(batch + (5, 2))
        fu[..., 3, 0] = 1.0
        fu[..., 4, 1] = 1.0
        return fx, fu

    def params(self):
        return {"inter_axle": self.inter_axle}


@dataclass(frozen=True)
class Unicycle(ContinuousModel):
    """Planar unicycle, state ``(p_x, p_y, theta, v)``, controls ``(omega, a)``."""

    model_id = "unicycle"
    state_dim = 4
    control_dim = 2
    position_indices = (0, 1)

    def f(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        theta, v = x[..., 2], x[..., 3]
        return np.stack([v * np.cos(theta), v * np.sin(theta), u[..., 0], u[..., 1]], axis=-1)

    def jacobians(self, x, u):
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        theta, v = x[..., 2], x[..., 3]
        fx = np.zeros(batch + (4, 4))
        fx[..., 0, 2] = -v * np.sin(theta)
        fx[..., 0, 3] = np.cos(theta)
        fx[..., 1, 2] = v * np.cos(theta)
        fx[..., 1, 3] = np.sin(theta)
        fu = np.zeros(batch + (4, 2))
        fu[..., 2, 0] = 1.0
        fu[..., 3, 1] = 1.0
        return fx, fu


@dataclass(frozen=True)
class Quadrotor14(ContinuousModel):
    """Quadrotor with a double integrator on thrust.

    State ``(p_x, p_y, p_z, psi, theta, phi, v_x, v_y, v_z, zeta, xi, p, q, r)``
    where ``zeta`` is thrust and ``xi`` its rate. Controls are
    ``(tau, alpha_x, alpha_y, alpha_z)``: thrust second derivative and angular
    accelerations. Angle rates follow ``psi' = q, theta' = r, phi' = p``.
    """

    mass: float = 1.0
    inertia_x: float = 1.0
    inertia_y: float = 1.0
    inertia_z: float = 1.0
    gravity: float = GRAVITY
    model_id = "quadrotor14"
    state_dim = 14
    control_dim = 4
    position_indices = (0, 1, 2)

    def __post_init__(self):
        for name in ("mass", "inertia_x", "inertia_y", "inertia_z"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def _thrust_directions(self, psi, theta, phi):
        sps, cps = np.sin(psi), np.cos(psi)
        sth, cth = np.sin(theta), np.cos(theta)
        sph, cph = np.sin(phi), np.cos(phi)
        m = self.mass
        gx = (sph * sps + cph * cps * sth) / m
        gy = (cph * sps * sth - cps * sph) / m
        gz = cph * cth / m
        return gx, gy, gz

    def f(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        psi, theta, phi = x[..., 3], x[..., 4], x[..., 5]
        zeta = x[..., 9]
        gx, gy, gz = self._thrust_directions(psi, theta, phi)
        return np.stack(
            [
                x[..., 6],
                x[..., 7],
                x[..., 8],
                x[..., 12],
                x[..., 13],
                x[..., 11],
                gx * zeta,
                gy * zeta,
                gz * zeta - self.gravity,
                x[..., 10],
                u[..., 0],
                u[..., 1] / self.inertia_x,
                u[..., 2] / self.inertia_y,
                u[..., 3] / self.inertia_z,
            ],
            axis=-1,
        )

    def jacobians(self, x, u):
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        psi, theta, phi, zeta = x[..., 3], x[..., 4], x[..., 5], x[..., 9]
        sps, cps = np.sin(psi), np.cos(psi)
        sth, cth = np.sin(theta), np.cos(theta)
        sph, cph = np.sin(phi), np.cos(phi)
        m = self.mass
        gx, gy, gz = self._thrust_directions(psi, theta, phi)

        fx = np.zeros(batch + (14, 14))
        fx[..., 0, 6] = fx[..., 1, 7] = fx[..., 2, 8] = 1.0
        fx[..., 3, 12] = 1.0
        fx[..., 4, 13] = 1.0
        fx[..., 5, 11] = 1.0
        fx[..., 9, 10] = 1.0
        # d/d(psi, theta, phi) of the thrust direction, times zeta
        fx[..., 6, 3] = zeta * (sph * cps - cph * sps * sth) / m
        fx[..., 6, 4] = zeta * (cph * cps * cth) / m
        fx[..., 6, 5] = zeta * (cph * sps - sph * cps * sth) / m
        fx[..., 7, 3] = zeta * (cph * cps * sth + sps * sph) / m
        fx[..., 7, 4] = zeta * (cph * sps * cth) / m
        fx[..., 7, 5] = zeta * (-sph * sps * sth - cps * cph) / m
        fx[..., 8, 4] = -zeta * cph * sth / m
        fx[..., 8, 5] = -zeta * sph * cth / m
        fx[..., 6, 9] = gx
        fx[..., 7, 9] = gy
        fx[..., 8, 9] = gz

        fu = np.zeros(batch + (14, 4))
        fu[..., 10, 0] = 1.0
        fu[..., 11, 1] = 1.0 / self.inertia_x
        fu[..., 12, 2] = 1.0 / self.inertia_y
        fu[..., 13, 3] = 1.0 / self.inertia_z
        return fx, fu

    def params(self):
        return {
            "mass": self.mass,
            "inertia_x": self.inertia_x,
            "inertia_y": self.inertia_y,
            "inertia_z": self.inertia_z,
            "gravity": self.gravity,
        }


def _fd_step(v: np.ndarray) -> np.ndarray:
    return np.maximum(1e-6 * np.abs(v), 1e-8)


def _central_difference(f, x, u):
    """Central-difference Jacobians of ``f(x, u)`` (relative step 1e-6, floor 1e-8)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f0 = f(x, u)
    n, m = x.shape[-1], u.shape[-1]
    batch = x.shape[:-1]
    fx = np.zeros(batch + (f0.shape[-1], n))
    fu = np.zeros(batch + (f0.shape[-1], m))
    hx, hu = _fd_step(x), _fd_step(u)
    for k in range(n):
        d = np.zeros_like(x)
        d[..., k] = hx[..., k]
        fx[..., :, k] = (f(x + d, u) - f(x - d, u)) / (2.0 * hx[..., k, None])
    for k in range(m):
        d = np.zeros_like(u)
        d[..., k] = hu[..., k]
        fu[..., :, k] = (f(x, u + d) - f(x, u - d)) / (2.0 * hu[..., k, None])
    return fx, fu


# ---------------------------------------------------------------------------
# Discrete multi-player systems
# ---------------------------------------------------------------------------


class MultiPlayerSystem:
    """Base class for ``x_{t+1} = f_t(x_t, u_t^1, ..., u_t^N)``."""

    state_dim: int
    control_dims: list
    dt: float

    @property
    def num_players(self) -> int:
        return len(self.control_dims)

    def check(self, x, us) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise DimensionError(f"state has shape {x.shape}, expected ({self.state_dim},)")
        if len(us) != self.num_players:
            raise DimensionError(f"got controls for {len(us)} players, expected {self.num_players}")
        out = []
        for i, (u, m) in enumerate(zip(us, self.control_dims)):
            u = np.asarray(u, dtype=float)
            if u.shape != (m,):
                raise DimensionError(f"player {i} control has shape {u.shape}, expected ({m},)")
            out.append(u)
        return x, out

    def step(self, x, us, t: int = 0) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, xs, us_list, ts=None):
        """Batched ``(A, [B_i])`` at states ``xs`` (T, n) and controls ``us_list[i]`` (T, m_i).

        Falls back to central finite differences of :meth:`step`.
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        T, n = xs.shape
        As = np.zeros((T, n, n))
        Bs = [np.zeros((T, n, m)) for m in self.control_dims]
        for t in range(T):
            x = xs[t]
            us = [np.asarray(u[t], dtype=float) for u in us_list]
            hx = _fd_step(x)
            for k in range(n):
                d = np.zeros(n)
                d[k] = hx[k]
                As[t, :, k] = (self.step(x + d, us, t) - self.step(x - d, us, t)) / (2 * hx[k])
            for i, u in enumerate(us):
                hu = _fd_step(u)
                for k in range(u.size):
                    d = np.zeros(u.size)
                    d[k] = hu[k]
                    up = list(us)
                    um = list(us)
                    up[i] = u + d
                    um[i] = u - d
                    Bs[i][t, :, k] = (self.step(x, up, t) - self.step(x, um, t)) / (2 * hu[k])
        return As, Bs

    def player_state_slice(self, player: int) -> slice:
        """State coordinates owned by ``player`` (whole state unless overridden)."""
        return slice(0, self.state_dim)

    def position_indices(self, player: int) -> tuple:
        raise ValueError(f"system does not define positions for player {player}")


class ProductSystem(MultiPlayerSystem):
    """Decoupled stack of Euler-discretized single-agent models, one per player."""

    def __init__(self, models: Sequence[ContinuousModel], dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if not models:
            raise ValueError("need at least one subsystem")
        self.models = tuple(models)
        self.dt = float(dt)
        self.control_dims = [mdl.control_dim for mdl in self.models]
        self.offsets = np.cumsum([0] + [mdl.state_dim for mdl in self.models])
        self.state_dim = int(self.offsets[-1])

    def __repr__(self):
        names = ", ".join(m.model_id for m in self.models)
        return f"ProductSystem([{names}], dt={self.dt})"

    def player_state_slice(self, player):
        return slice(int(self.offsets[player]), int(self.offsets[player + 1]))

    def position_indices(self, player):
        off = int(self.offsets[player])
        return tuple(off + k for k in self.models[player].position_indices)

    def continuous(self, x, us) -> np.ndarray:
        """Stacked continuous-time vector field."""
        x = np.asarray(x, dtype=float)
        parts = []
        for i, mdl in enumerate(self.models):
            parts.append(mdl.f(x[..., self.player_state_slice(i)], np.asarray(us[i], dtype=float)))
        return np.concatenate(parts, axis=-1)

    def step(self, x, us, t=0):
        x, us = self.check(x, us)
        return x + self.dt * self.continuous(x, us)

    def jacobians(self, xs, us_list, ts=None):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        T, n = xs.shape
        As = np.broadcast_to(np.eye(n), (T, n, n)).copy()
        Bs = []
        for i, mdl in enumerate(self.models):
            sl = self.player_state_slice(i)
            fx, fu = mdl.jacobians(xs[:, sl], np.asarray(us_list[i], dtype=float))
            As[:, sl, sl] += self.dt * fx
            B = np.zeros((T, n, mdl.control_dim))
            B[:, sl, :] = self.dt * fu
            Bs.append(B)
        return As, Bs


class LinearSystem(MultiPlayerSystem):
    """Exact discrete affine dynamics ``x_{t+1} = A x_t + sum_i B_i u_t^i + c``."""

    def __init__(self, A, Bs, dt: float = 0.1, c=None, positions=None):
        self.A = _frozen(np.atleast_2d(A))
        self.Bs = tuple(_frozen(np.atleast_2d(B)) for B in Bs)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError("A must be square")
        for i, B in enumerate(self.Bs):
            if B.shape[0] != n:
                raise DimensionError(f"B for player {i} has {B.shape[0]} rows, expected {n}")
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.c = _frozen(np.zeros(n) if c is None else c)
        self.state_dim = n
        self.control_dims = [B.shape[1] for B in self.Bs]
        self.dt = float(dt)
        # optional per-player position coordinates for proximity-type costs
        self._positions = None if positions is None else [tuple(p) for p in positions]

    def position_indices(self, player):
        if self._positions is None:
            return super().position_indices(player)
        return self._positions[player]

    def step(self, x, us, t=0):
        x, us = self.check(x, us)
        out = self.A @ x + self.c
        for B, u in zip(self.Bs, us):
            out = out + B @ u
        return out

    def jacobians(self, xs, us_list, ts=None):
        T = np.atleast_2d(xs).shape[0]
        As = np.broadcast_to(self.A, (T,) + self.A.shape).copy()
        return As, [np.broadcast_to(B, (T,) + B.shape).copy() for B in self.Bs]


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------


def step(system: MultiPlayerSystem, x, us, t: int = 0) -> np.ndarray:
    """Advance one timestep."""
    return system.step(x, us, t)


def linearize(system: MultiPlayerSystem, op: OperatingPoint) -> LinearizedDynamics:
    """Jacobians of :func:`step` along every timestep of ``op``."""
    if op.xs.shape[1] != system.state_dim or op.num_players != system.num_players:
        raise DimensionError("operating point does not match system dimensions")
    for i, (u, m) in enumerate(zip(op.us, system.control_dims)):
        if u.shape[1] != m:
            raise DimensionError(f"player {i} controls have width {u.shape[1]}, expected {m}")
    As, Bs = system.jacobians(op.xs[:-1], list(op.us))
    return LinearizedDynamics(As, tuple(Bs))


def rollout(
    system: MultiPlayerSystem,
    x1,
    strategies: Sequence[AffineStrategy],
    reference: OperatingPoint,
) -> OperatingPoint:
    """Simulate the feedback laws ``u = u_ref - P (x - x_ref) - alpha`` from ``x1``."""
    T = reference.horizon
    if len(strategies) != system.num_players:
        raise DimensionError(f"got {len(strategies)} strategies for {system.num_players} players")
    for i, s in enumerate(strategies):
        if s.horizon != T:
            raise DimensionError(f"strategy {i} has horizon {s.horizon}, reference has {T}")
    x = np.asarray(x1, dtype=float)
    xs = np.empty((T + 1, system.state_dim))
    us = [np.empty((T, m)) for m in system.control_dims]
    xs[0] = x
    for t in range(T):
        dx = x - reference.xs[t]
        controls = []
        for i, s in enumerate(strategies):
            u = reference.us[i][t] - s.Ps[t] @ dx - s.alphas[t]
            us[i][t] = u
            controls.append(u)
        x = system.step(x, controls, t)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(t + 1)
        xs[t + 1] = x
    return OperatingPoint(xs, tuple(us), consistent=True)


def simulate(system: MultiPlayerSystem, x1, controls: Sequence[np.ndarray]) -> OperatingPoint:
    """Open-loop simulation of per-player control sequences ``controls[i]`` (T x m_i)."""
    controls = [np.atleast_2d(np.asarray(u, dtype=float)) for u in controls]
    T = controls[0].shape[0]
    xs = np.empty((T + 1, system.state_dim))
    xs[0] = x1
    for t in range(T):
        xs[t + 1] = system.step(xs[t], [u[t] for u in controls], t)
        if not np.all(np.isfinite(xs[t + 1])):
            raise DivergenceError(t + 1)
    return OperatingPoint(xs, tuple(controls), consistent=True)


def zero_control_rollout(system: MultiPlayerSystem, x1, horizon: int) -> OperatingPoint:
    return simulate(system, x1, [np.zeros((horizon, m)) for m in system.control_dims])


def dynamics_residual(system: MultiPlayerSystem, op: OperatingPoint) -> float:
    """Largest per-coordinate mismatch ``|x_{t+1} - f(x_t, u_t)|`` along ``op``."""
    worst = 0.0
    for t in range(op.horizon):
        pred = system.step(op.xs[t], op.controls_at(t), t)
        worst = max(worst, float(np.max(np.abs(pred - op.xs[t + 1]))))
    return worst
