"""Per-player costs: instantaneous state costs, time aggregation and quadraticization.

Time convention: a horizon-``T`` trajectory has states ``x_0 .. x_T`` and
controls ``u_0 .. u_{T-1}``. Cost term ``k`` (``k = 1 .. T``) pairs the state
``x_k`` with the control that produced it::

    g~_k = g(x_k) + 0.5 * epsilon * ||u^i_{k-1}||^2

The initial state is fixed and carries no cost. Aggregation is ``sum``,
``max`` or ``min`` over ``k``. Time indices returned by
:func:`argextremum_time` are state indices, so they coincide with the 1-based
position of the term in the sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import OperatingPoint

AGGREGATIONS = ("sum", "max", "min")


# ---------------------------------------------------------------------------
# Instantaneous costs g(x)
# ---------------------------------------------------------------------------


class InstantaneousCost:
    """A twice-differentiable (almost everywhere) function of the joint state."""

    kind = "abstract"

    def values(self, xs: np.ndarray) -> np.ndarray:
        """Evaluate on a batch of states ``xs`` of shape (K, n)."""
        raise NotImplementedError

    def value(self, x: np.ndarray) -> float:
        return float(self.values(np.asarray(x, dtype=float)[None, :])[0])

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def indices(self) -> set:
        """State coordinates the cost reads; used for validation."""
        return set()


@dataclass(frozen=True)
class ProximityAvoid(InstantaneousCost):
    """``g = separation - min_j ||p_ego - p_j||``.

    ``ego`` holds the state indices of the ego position and ``opponents`` one
    index tuple per opposing player. Exact ties between opponents resolve to
    the lowest-listed opponent.
    """

    separation: float
    ego: tuple
    opponents: tuple
    kind = "proximity_avoid"

    def __post_init__(self):
        object.__setattr__(self, "ego", tuple(int(k) for k in self.ego))
        object.__setattr__(self, "opponents", tuple(tuple(int(k) for k in o) for o in self.opponents))
        if not self.opponents:
            raise ValueError("proximity cost needs at least one opponent")
        for o in self.opponents:
            if len(o) != len(self.ego):
                raise ValueError("opponent position dimension differs from ego position dimension")

    def distances(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        p = xs[:, list(self.ego)]
        return np.stack(
            [np.linalg.norm(p - xs[:, list(o)], axis=1) for o in self.opponents], axis=1
        )

    def values(self, xs):
        return self.separation - self.distances(xs).min(axis=1)

    def _active(self, x):
        d = self.distances(x[None, :])[0]
        j = int(np.argmin(d))
        return self.opponents[j], d[j]

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        opp, dist = self._active(x)
        grad = np.zeros(x.size)
        if dist == 0.0:
            return grad
        unit = (x[list(self.ego)] - x[list(opp)]) / dist
        grad[list(self.ego)] -= unit
        grad[list(opp)] += unit
        return grad

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        opp, dist = self._active(x)
        n = x.size
        H = np.zeros((n, n))
        if dist == 0.0:
            return H
        unit = (x[list(self.ego)] - x[list(opp)]) / dist
        # Hessian of -||d|| with d = p_ego - p_opp
        block = -(np.eye(unit.size) - np.outer(unit, unit)) / dist
        e, o = list(self.ego), list(opp)
        H[np.ix_(e, e)] += block
        H[np.ix_(o, o)] += block
        H[np.ix_(e, o)] -= block
        H[np.ix_(o, e)] -= block
        return H

    def indices(self):
        out = set(self.ego)
        for o in self.opponents:
            out |= set(o)
        return out


@dataclass(frozen=True)
class ProximityPenalty(InstantaneousCost):
    """Smooth soft-constraint ``sum_j max(0, separation - ||p_ego - p_j||)^2``.

    Used inside nominal (sum-over-time) costs where a signed distance would
    reward ever-increasing separation.
    """

    separation: float
    ego: tuple
    opponents: tuple
    kind = "proximity_penalty"

    def __post_init__(self):
        object.__setattr__(self, "ego", tuple(int(k) for k in self.ego))
        object.__setattr__(self, "opponents", tuple(tuple(int(k) for k in o) for o in self.opponents))
        if not self.opponents:
            raise ValueError("proximity cost needs at least one opponent")

    def values(self, xs):
        xs = np.atleast_2d(xs)
        p = xs[:, list(self.ego)]
        total = np.zeros(xs.shape[0])
        for o in self.opponents:
            gap = self.separation - np.linalg.norm(p - xs[:, list(o)], axis=1)
            total += np.maximum(gap, 0.0) ** 2
        return total

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        grad = np.zeros(x.size)
        e = list(self.ego)
        for o in self.opponents:
            d = x[e] - x[list(o)]
            dist = np.linalg.norm(d)
            gap = self.separation - dist
            if gap <= 0 or dist == 0:
                continue
            unit = d / dist
            grad[e] -= 2 * gap * unit
            grad[list(o)] += 2 * gap * unit
        return grad

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        n = x.size
        H = np.zeros((n, n))
        e = list(self.ego)
        for o in self.opponents:
            o = list(o)
            d = x[e] - x[o]
            dist = np.linalg.norm(d)
            gap = self.separation - dist
            if gap <= 0 or dist == 0:
                continue
            unit = d / dist
            proj = np.eye(unit.size) - np.outer(unit, unit)
            block = 2 * np.outer(unit, unit) - 2 * gap * proj / dist
            H[np.ix_(e, e)] += block
            H[np.ix_(o, o)] += block
            H[np.ix_(e, o)] -= block
            H[np.ix_(o, e)] -= block
        return H

    def indices(self):
        out = set(self.ego)
        for o in self.opponents:
            out |= set(o)
        return out


@dataclass(frozen=True)
class CubeSignedDistance(InstantaneousCost):
    """``g = ||p||_inf - half_width``; positive outside the cube."""

    half_width: float
    position: tuple
    kind = "cube_signed_distance"

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(int(k) for k in self.position))
        if self.half_width <= 0:
            raise ValueError("cube half-width must be positive")

    def values(self, xs):
        xs = np.atleast_2d(xs)
        return np.abs(xs[:, list(self.position)]).max(axis=1) - self.half_width

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        p = x[list(self.position)]
        k = int(np.argmax(np.abs(p)))  # lowest index on ties
        grad = np.zeros(x.size)
        grad[self.position[k]] = 1.0 if p[k] >= 0 else -1.0
        return grad

    def hessian(self, x):
        n = np.asarray(x).size
        return np.zeros((n, n))

    def indices(self):
        return set(self.position)


@dataclass(frozen=True)
class QuadraticTracking(InstantaneousCost):
    """``g = 0.5 * sum_k w_k (x[idx_k] - target_k)^2``."""

    index: tuple
    target: tuple
    weight: tuple
    kind = "quadratic_tracking"

    def __post_init__(self):
        object.__setattr__(self, "index", tuple(int(k) for k in self.index))
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        object.__setattr__(self, "weight", tuple(float(v) for v in self.weight))
        if not (len(self.index) == len(self.target) == len(self.weight)):
            raise ValueError("tracking index, target and weight lengths differ")
        if any(w < 0 for w in self.weight):
            raise ValueError("tracking weights must be non-negative")

    def values(self, xs):
        xs = np.atleast_2d(xs)
        err = xs[:, list(self.index)] - np.array(self.target)
        return 0.5 * (np.array(self.weight) * err**2).sum(axis=1)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        grad = np.zeros(x.size)
        for k, tgt, w in zip(self.index, self.target, self.weight):
            grad[k] += w * (x[k] - tgt)
        return grad

    def hessian(self, x):
        n = np.asarray(x).size
        H = np.zeros((n, n))
        for k, w in zip(self.index, self.weight):
            H[k, k] += w
        return H

    def indices(self):
        return set(self.index)


@dataclass(frozen=True)
class CompositeSum(InstantaneousCost):
    """Weighted sum of other instantaneous costs."""

    terms: tuple  # of (weight, InstantaneousCost)
    kind = "composite_sum"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((float(w), c) for w, c in self.terms))
        if not self.terms:
            raise ValueError("composite cost needs at least one term")

    def values(self, xs):
        return sum(w * c.values(xs) for w, c in self.terms)

    def gradient(self, x):
        return sum(w * c.gradient(x) for w, c in self.terms)

    def hessian(self, x):
        return sum(w * c.hessian(x) for w, c in self.terms)

    def indices(self):
        out = set()
        for _, c in self.terms:
            out |= c.indices()
        return out


@dataclass(frozen=True)
class ScalarFunctionCost(InstantaneousCost):
    """Cost from user-supplied callables on the state (value, gradient, Hessian)."""

    func: object
    grad: object
    hess: object
    kind = "callable"

    def values(self, xs):
        return np.array([float(self.func(x)) for x in np.atleast_2d(xs)])

    def gradient(self, x):
        return np.asarray(self.grad(np.asarray(x, dtype=float)), dtype=float).reshape(-1)

    def hessian(self, x):
        return np.atleast_2d(np.asarray(self.hess(np.asarray(x, dtype=float)), dtype=float))


# ---------------------------------------------------------------------------
# Player cost and aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlayerCost:
    instantaneous: InstantaneousCost
    aggregation: str = "max"
    epsilon: float = 0.1

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    @property
    def is_extremum(self) -> bool:
        return self.aggregation != "sum"

    def with_epsilon(self, epsilon: float) -> "PlayerCost":
        return replace(self, epsilon=float(epsilon))


@dataclass(frozen=True)
class QuadraticCostTerms:
    """Quadratic model of one player's objective about an operating point.

    ``Q``/``q`` are indexed by state time (``Q[0]`` is always zero); ``R[j]``
    and ``r[j]`` by control time, one entry per player ``j``. ``active_time``
    is the argmax/argmin state index for extremum costs and ``None`` for sums.
    """

    Q: np.ndarray
    q: np.ndarray
    R: tuple
    r: tuple
    offset: float = 0.0
    active_time: int | None = None
    Q_raw: np.ndarray | None = field(default=None, repr=False)

    @property
    def horizon(self) -> int:
        return self.Q.shape[0] - 1


def per_time_values(cost: PlayerCost, op: OperatingPoint, player: int, relaxed: bool = True) -> np.ndarray:
    """``g~_k`` for ``k = 1 .. T`` (returned array index ``k - 1``)."""
    vals = np.asarray(cost.instantaneous.values(op.xs[1:]), dtype=float)
    if relaxed and cost.epsilon > 0:
        vals = vals + 0.5 * cost.epsilon * np.sum(op.us[player] ** 2, axis=1)
    return vals


def aggregate(values: np.ndarray, aggregation: str) -> float:
    if aggregation == "sum":
        return float(np.sum(values))
    if aggregation == "max":
        return float(np.max(values))
    if aggregation == "min":
        return float(np.min(values))
    raise ValueError(f"unknown aggregation {aggregation!r}")


def evaluate(cost: PlayerCost, op: OperatingPoint, player: int, relaxed: bool = True) -> float:
    """Aggregated objective of ``player`` along ``op``.

    With ``relaxed=False`` the control term is dropped, giving the plain
    extremum (or sum) of the state cost.
    """
    return aggregate(per_time_values(cost, op, player, relaxed), cost.aggregation)


def surrogate_value(cost: PlayerCost, op: OperatingPoint, player: int) -> float:
    """Objective whose quadratic model :func:`quadraticize` builds.

    The control penalty ``0.5 * epsilon * sum_t ||u_t||^2`` is summed over
    time outside the extremum. For sum costs this equals :func:`evaluate`.
    """
    state = aggregate(per_time_values(cost, op, player, relaxed=False), cost.aggregation)
    return state + 0.5 * cost.epsilon * float(np.sum(op.us[player] ** 2))


def extremum_index(values: Sequence[float], aggregation: str) -> int:
    """0-based position of the earliest max (or min) in ``values``."""
    values = np.asarray(values, dtype=float)
    if aggregation == "max":
        return int(np.argmax(values))
    if aggregation == "min":
        return int(np.argmin(values))
    raise ValueError("extremum index is only defined for max/min aggregation")


def argextremum_time(cost: PlayerCost, op: OperatingPoint, player: int) -> int:
    """State index ``t'`` (1..T) attaining the extremum of ``g~``; earliest on ties."""
    return extremum_index(per_time_values(cost, op, player), cost.aggregation) + 1


def blend(a: QuadraticCostTerms, b: QuadraticCostTerms, weight: float) -> QuadraticCostTerms:
    """``weight * a + (1 - weight) * b`` for state terms; control terms from ``a``."""
    w = float(weight)
    Q_raw = None if a.Q_raw is None or b.Q_raw is None else w * a.Q_raw + (1 - w) * b.Q_raw
    return QuadraticCostTerms(
        w * a.Q + (1 - w) * b.Q,
        w * a.q + (1 - w) * b.q,
        a.R,
        a.r,
        w * a.offset + (1 - w) * b.offset,
        a.active_time,
        Q_raw,
    )


def project_psd(H: np.ndarray) -> np.ndarray:
    """Nearest PSD matrix (negative eigenvalues clamped); PSD input returned as-is."""
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    if w.size == 0 or w[0] >= 0.0:
        return H
    out = (V * np.maximum(w, 0.0)) @ V.T
    return 0.5 * (out + out.T)


def quadraticize(
    cost: PlayerCost,
    op: OperatingPoint,
    player: int,
    project: bool = True,
    at: int | None = None,
) -> QuadraticCostTerms:
    """Second-order model of ``player``'s objective about ``op``.

    Sum costs are expanded at every state. Extremum costs are expanded only at
    ``t'`` from :func:`argextremum_time`; state derivatives elsewhere are zero.
    The control term contributes ``R = epsilon I`` and ``r = epsilon u`` at
    every control time regardless of aggregation. ``at`` forces the expansion
    time of an extremum cost.
    """
    T = op.horizon
    n = op.xs.shape[1]
    g = cost.instantaneous
    Q = np.zeros((T + 1, n, n))
    q = np.zeros((T + 1, n))
    Q_raw = np.zeros((T + 1, n, n))
    active = None
    if cost.is_extremum:
        active = argextremum_time(cost, op, player) if at is None else int(at)
        if not 1 <= active <= T:
            raise ValueError(f"expansion time {active} outside 1..{T}")
        x = op.xs[active]
        Q_raw[active] = g.hessian(x)
        q[active] = g.gradient(x)
        offset = float(g.value(x))
    else:
        for k in range(1, T + 1):
            x = op.xs[k]
            Q_raw[k] = g.hessian(x)
            q[k] = g.gradient(x)
        offset = float(np.sum(g.values(op.xs[1:])))
    for k in range(1, T + 1):
        Q[k] = project_psd(Q_raw[k]) if project else 0.5 * (Q_raw[k] + Q_raw[k].T)

    R, r = [], []
    for j, u in enumerate(op.us):
        m = u.shape[1]
        if j == player:
            R.append(np.broadcast_to(cost.epsilon * np.eye(m), (T, m, m)).copy())
            r.append(cost.epsilon * np.array(u))
        else:
            R.append(np.zeros((T, m, m)))
            r.append(np.zeros((T, m)))
    offset += 0.5 * cost.epsilon * float(np.sum(op.us[player] ** 2))
    return QuadraticCostTerms(Q, q, tuple(R), tuple(r), offset, active, Q_raw)
