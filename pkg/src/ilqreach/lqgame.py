"""Feedback Nash equilibrium of finite-horizon linear-quadratic games.

Deviation dynamics ``dx_{t+1} = A_t dx_t + sum_j B_t^j du_t^j`` and player
``i`` minimizes

    sum_{t=1}^{T} (0.5 dx_t' Q_t^i dx_t + q_t^i' dx_t)
  + sum_{t=0}^{T-1} sum_j (0.5 du_t^j' R_t^{ij} du_t^j + r_t^{ij}' du_t^j)

Strategies are ``du_t^i = -P_t^i dx_t - alpha_t^i``. The coupled
per-step conditions for all players are stacked into one dense linear
system and solved at once; with a single player this is the Riccati
recursion of LQR.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .costs import QuadraticCostTerms
from .dynamics import AffineStrategy, LinearizedDynamics

CONDITION_LIMIT = 1e12


class LQConditioningError(np.linalg.LinAlgError):
    """The stacked Nash system at some timestep is singular or ill-conditioned."""

    def __init__(self, timestep: int, condition: float, iteration: int | None = None):
        self.timestep = timestep
        self.condition = condition
        self.iteration = iteration
        where = f"timestep {timestep}"
        if iteration is not None:
            where += f" (solver iteration {iteration})"
        super().__init__(f"LQ game system ill-conditioned at {where}: cond={condition:.3g}")


@dataclass(frozen=True)
class ValueExpansion:
    """Quadratic value ``0.5 dx' Z_t dx + zeta_t' dx + c_t`` for ``t = 0 .. T``."""

    Z: np.ndarray
    zeta: np.ndarray
    offset: np.ndarray


@dataclass(frozen=True)
class FeedbackPass:
    """Gains and value Hessians of an LQ game, independent of the linear cost terms.

    Feedforward terms are linear in the cost gradients for fixed gains, so
    several gradient sets can share one pass (see :func:`feedforward_pass`).
    """

    Ps: np.ndarray  # (T, mtot, n) stacked over players
    F: np.ndarray  # (T, n, n) closed-loop transition
    Z: np.ndarray  # (N, T + 1, n, n)
    B: np.ndarray  # (T, n, mtot)
    R: np.ndarray  # (N, T, mtot, mtot)
    factors: tuple
    blocks: tuple

    @property
    def horizon(self) -> int:
        return self.Ps.shape[0]


def _check_shapes(lin: LinearizedDynamics, quads: Sequence[QuadraticCostTerms]) -> None:
    T, n, N = lin.horizon, lin.state_dim, len(lin.control_dims)
    if len(quads) != N:
        raise ValueError(f"got {len(quads)} cost expansions for {N} players")
    for i, qt in enumerate(quads):
        if qt.Q.shape != (T + 1, n, n):
            raise ValueError(f"player {i} state Hessians have shape {qt.Q.shape}")


def stacked_control_terms(quads: Sequence[QuadraticCostTerms], m: Sequence[int]):
    """Per-player ``R`` (N, T, mtot, mtot) and ``r`` (N, T, mtot) over the stacked control."""
    rows = np.concatenate([[0], np.cumsum(m)])
    blocks = [slice(rows[j], rows[j + 1]) for j in range(len(m))]
    T = quads[0].Q.shape[0] - 1
    mtot = int(rows[-1])
    R = np.zeros((len(quads), T, mtot, mtot))
    r = np.zeros((len(quads), T, mtot))
    for i, qt in enumerate(quads):
        for j, bj in enumerate(blocks):
            R[i, :, bj, bj] = qt.R[j]
            r[i, :, bj] = qt.r[j]
    return R, r, tuple(blocks)


def feedback_pass(lin: LinearizedDynamics, quads: Sequence[QuadraticCostTerms]) -> FeedbackPass:
    """Backward recursion for the Nash gains ``P`` and value Hessians ``Z``."""
    _check_shapes(lin, quads)
    T, n = lin.horizon, lin.state_dim
    N = len(quads)
    R, _, blocks = stacked_control_terms(quads, lin.control_dims)
    mtot = R.shape[-1]
    B = np.concatenate(lin.Bs, axis=2)
    Zs = np.zeros((N, T + 1, n, n))
    for i, qt in enumerate(quads):
        Zs[i, T] = qt.Q[T]
    Ps = np.zeros((T, mtot, n))
    F = np.zeros((T, n, n))
    factors = [None] * T
    for t in range(T - 1, -1, -1):
        A, Bt = lin.As[t], B[t]
        S = np.empty((mtot, mtot))
        Y = np.empty((mtot, n))
        for i, bi in enumerate(blocks):
            BiZ = Bt[:, bi].T @ Zs[i, t + 1]
            S[bi] = BiZ @ Bt
            S[bi, bi] += R[i, t, bi, bi]
            Y[bi] = BiZ @ A
        cond = np.linalg.cond(S) if np.all(np.isfinite(S)) else np.inf
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            raise LQConditioningError(t, float(cond))
        lu = scipy.linalg.lu_factor(S, check_finite=False)
        P = scipy.linalg.lu_solve(lu, Y, check_finite=False)
        Ft = A - Bt @ P
        for i in range(N):
            newZ = quads[i].Q[t] + Ft.T @ Zs[i, t + 1] @ Ft + P.T @ R[i, t] @ P
            Zs[i, t] = 0.5 * (newZ + newZ.T)
        Ps[t], F[t], factors[t] = P, Ft, lu
    return FeedbackPass(Ps, F, Zs, B, R, tuple(factors), blocks)


def feedforward_pass(fb: FeedbackPass, q: np.ndarray, r: np.ndarray):
    """Feedforwards for ``K`` sets of linear cost terms at once.

    ``q`` has shape (N, T + 1, n, K) and ``r`` (N, T, mtot, K). Returns
    stacked feedforwards (T, mtot, K) and value gradients (N, T + 1, n, K).
    """
    N, T1, n, K = q.shape
    T = T1 - 1
    mtot = fb.Ps.shape[1]
    alphas = np.zeros((T, mtot, K))
    zetas = np.zeros((N, T + 1, n, K))
    zetas[:, T] = q[:, T]
    for t in range(T - 1, -1, -1):
        Bt = fb.B[t]
        Y = np.empty((mtot, K))
        for i, bi in enumerate(fb.blocks):
            Y[bi] = Bt[:, bi].T @ zetas[i, t + 1] + r[i, t, bi]
        a = scipy.linalg.lu_solve(fb.factors[t], Y, check_finite=False)
        beta = -Bt @ a
        P, Ft = fb.Ps[t], fb.F[t]
        for i in range(N):
            zn = zetas[i, t + 1]
            zetas[i, t] = q[i, t] + Ft.T @ (zn + fb.Z[i, t + 1] @ beta) + P.T @ (fb.R[i, t] @ a - r[i, t])
        alphas[t] = a
    return alphas, zetas


def split_strategies(fb: FeedbackPass, alphas: np.ndarray) -> list[AffineStrategy]:
    """Per-player strategies from stacked gains and one column of feedforwards."""
    return [AffineStrategy(fb.Ps[:, bi, :].copy(), alphas[:, bi].copy()) for bi in fb.blocks]


def solve_lq_game(
    lin: LinearizedDynamics,
    quads: Sequence[QuadraticCostTerms],
) -> tuple[list[AffineStrategy], list[ValueExpansion]]:
    fb = feedback_pass(lin, quads)
    T = lin.horizon
    N = len(quads)
    _, r, _ = stacked_control_terms(quads, lin.control_dims)
    q = np.stack([qt.q for qt in quads])[..., None]
    alphas, zetas = feedforward_pass(fb, q, r[..., None])
    alphas, zetas = alphas[..., 0], zetas[..., 0]

    # Scalar offsets of the value functions.
    cs = np.zeros((N, T + 1))
    for t in range(T - 1, -1, -1):
        a = alphas[t]
        beta = -fb.B[t] @ a
        for i in range(N):
            zn, Zn, R = zetas[i, t + 1], fb.Z[i, t + 1], fb.R[i, t]
            cs[i, t] = cs[i, t + 1] + zn @ beta + 0.5 * beta @ Zn @ beta + 0.5 * a @ R @ a - r[i, t] @ a
    strategies = split_strategies(fb, alphas)
    values = [ValueExpansion(fb.Z[i].copy(), zetas[i].copy(), cs[i]) for i in range(N)]
    return strategies, values


def solve_lqr(lin: LinearizedDynamics, quad: QuadraticCostTerms) -> tuple[AffineStrategy, ValueExpansion]:
    """Single-player special case of :func:`solve_lq_game`."""
    if len(lin.Bs) != 1:
        raise ValueError("solve_lqr expects single-player dynamics")
    strategies, values = solve_lq_game(lin, [quad])
    return strategies[0], values[0]
