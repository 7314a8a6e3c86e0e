"""Declarative scenario files.

A scenario is a YAML document describing the players (dynamics model,
parameters, initial state), one cost block per player, the solver settings
and exactly one run mode. ``scenarios/`` in this package holds annotated
examples. Validation errors name the offending field path and, when the
input came from text, its line.

Schema summary (defaults in parentheses)::

    name: str
    description: str ("")
    seed: int (0)
    dt: float (0.1)
    horizon: float seconds (2.0)
    run_mode: solve | sweep | receding_horizon (solve)
    players:
      - name: str
        model: bicycle | unicycle | quadrotor14
        params: {...}                model parameters ({})
        initial_state: [floats]
    costs:                           one entry per player, in player order
      - aggregation: sum | max | min (max)
        epsilon: float (0.1)
        term: {kind: ..., ...}       see _TERM_KINDS
    solver: {SolverConfig fields}
    sweep: {epsilons: [decreasing floats]}          sweep mode only
    receding_horizon:                                receding_horizon mode only
      ego: int (0)
      total_duration: float
      planning_horizon: float (horizon)
      replan_interval: float (dt)
      safety_threshold: float (0.0)
      warm_start: bool (true)
      compare_nominal: bool (true)
      safety_costs: {player index: cost block}       ego entry required
    verify_nash: {perturbations: int (50), radius: float (1e-3)}  optional
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .costs import (
    CompositeSum,
    CubeSignedDistance,
    PlayerCost,
    ProximityAvoid,
    ProximityPenalty,
    QuadraticTracking,
)
from .dynamics import Bicycle, ProductSystem, Quadrotor14, Unicycle
from .ilq import SolverConfig
from .safety import RecedingHorizonConfig

RUN_MODES = ("solve", "sweep", "receding_horizon")
MODELS = {"bicycle": Bicycle, "unicycle": Unicycle, "quadrotor14": Quadrotor14}
_TERM_KINDS = ("proximity_avoid", "proximity_penalty", "cube_signed_distance", "quadratic_tracking", "composite_sum")
_SOLVER_FIELDS = {f.name for f in fields(SolverConfig)}


class ScenarioError(ValueError):
    """Invalid scenario; ``path`` is the offending field, ``line`` 1-based when known."""

    def __init__(self, path: str, message: str, line: int | None = None, source: str | None = None):
        self.path = path
        self.line = line
        self.source = source
        where = path or "<root>"
        if line is not None:
            where += f" (line {line})"
        if source:
            where = f"{source}: {where}"
        super().__init__(f"{where}: {message}")


def _fmt(path: tuple) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


class _Checker:
    """Field access helpers that raise :class:`ScenarioError` with paths."""

    def __init__(self, node=None, source=None):
        self.node = node
        self.source = source

    def line(self, path: tuple) -> int | None:
        node = self.node
        if node is None:
            return None
        best = node.start_mark.line + 1
        for key in path:
            if isinstance(node, yaml.MappingNode):
                nxt = None
                for k, v in node.value:
                    if k.value == str(key):
                        nxt = v
                        break
                if nxt is None:
                    break
                node = nxt
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                node = node.value[key]
            else:
                break
            best = node.start_mark.line + 1
        return best

    def fail(self, path: tuple, message: str):
        raise ScenarioError(_fmt(path), message, self.line(path), self.source)

    def mapping(self, value, path):
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
        return value

    def sequence(self, value, path, length=None):
        if not isinstance(value, (list, tuple)):
            self.fail(path, f"expected a list, got {type(value).__name__}")
        if length is not None and len(value) != length:
            self.fail(path, f"expected {length} entries, got {len(value)}")
        return list(value)

    def number(self, value, path, positive=False, nonneg=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            self.fail(path, "must be finite")
        if positive and value <= 0:
            self.fail(path, f"must be positive, got {value}")
        if nonneg and value < 0:
            self.fail(path, f"must be non-negative, got {value}")
        return value

    def integer(self, value, path, low=None, high=None):
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(path, f"expected an integer, got {value!r}")
        if low is not None and value < low:
            self.fail(path, f"must be >= {low}, got {value}")
        if high is not None and value > high:
            self.fail(path, f"must be <= {high}, got {value}")
        return value

    def choice(self, value, path, options):
        if value not in options:
            self.fail(path, f"must be one of {', '.join(map(str, options))}; got {value!r}")
        return value

    def unknown(self, mapping, allowed, path):
        for key in mapping:
            if key not in allowed:
                self.fail(path + (key,), f"unknown field (allowed: {', '.join(sorted(allowed))})")


@dataclass(frozen=True)
class PlayerSpec:
    name: str
    model: str
    params: dict
    initial_state: tuple


@dataclass(frozen=True)
class Scenario:
    """Validated scenario with all defaults filled in."""

    name: str
    description: str
    seed: int
    dt: float
    horizon: float
    run_mode: str
    players: tuple
    costs: tuple
    solver: dict
    sweep: dict | None = None
    receding_horizon: dict | None = None
    verify_nash: dict | None = None

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def num_players(self) -> int:
        return len(self.players)

    def build_system(self) -> ProductSystem:
        return ProductSystem([MODELS[p.model](**p.params) for p in self.players], self.dt)

    def initial_state(self) -> np.ndarray:
        return np.concatenate([np.asarray(p.initial_state, dtype=float) for p in self.players])

    def build_costs(self, system: ProductSystem | None = None) -> list[PlayerCost]:
        system = system or self.build_system()
        return [_build_cost(block, i, system) for i, block in enumerate(self.costs)]

    def build_safety_costs(self, system: ProductSystem | None = None) -> list[PlayerCost]:
        """Nominal costs with the listed players' blocks replaced by their safety blocks."""
        if self.receding_horizon is None:
            raise ValueError(f"scenario {self.name!r} has no receding_horizon block")
        system = system or self.build_system()
        out = self.build_costs(system)
        for i, block in self.receding_horizon["safety_costs"].items():
            out[int(i)] = _build_cost(block, int(i), system)
        return out

    def solver_config(self, **overrides) -> SolverConfig:
        kw = dict(self.solver)
        if kw.get("epsilon_schedule") is not None:
            kw["epsilon_schedule"] = tuple(kw["epsilon_schedule"])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return SolverConfig(**kw)

    def rh_config(self) -> RecedingHorizonConfig:
        rh = self.receding_horizon
        if rh is None:
            raise ValueError(f"scenario {self.name!r} has no receding_horizon block")
        return RecedingHorizonConfig(
            total_duration=rh["total_duration"],
            planning_horizon=rh["planning_horizon"],
            replan_interval=rh["replan_interval"],
            safety_threshold=rh["safety_threshold"],
            ego=rh["ego"],
            warm_start=rh["warm_start"],
        )

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "description": self.description,
            "seed": self.seed,
            "dt": self.dt,
            "horizon": self.horizon,
            "run_mode": self.run_mode,
            "players": [
                {"name": p.name, "model": p.model, "params": dict(p.params), "initial_state": list(p.initial_state)}
                for p in self.players
            ],
            "costs": copy.deepcopy(list(self.costs)),
            "solver": dict(self.solver),
        }
        if out["solver"].get("epsilon_schedule") is not None:
            out["solver"]["epsilon_schedule"] = list(out["solver"]["epsilon_schedule"])
        if self.sweep is not None:
            out["sweep"] = {"epsilons": list(self.sweep["epsilons"])}
        if self.receding_horizon is not None:
            rh = copy.deepcopy(self.receding_horizon)
            rh["safety_costs"] = {int(k): v for k, v in rh["safety_costs"].items()}
            out["receding_horizon"] = rh
        if self.verify_nash is not None:
            out["verify_nash"] = dict(self.verify_nash)
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _state_index(system: ProductSystem, player: int, local: int) -> int:
    return int(system.offsets[player]) + local


def _build_term(term: dict, owner: int, system: ProductSystem):
    kind = term["kind"]
    if kind in ("proximity_avoid", "proximity_penalty"):
        ego = term.get("ego", owner)
        cls = ProximityAvoid if kind == "proximity_avoid" else ProximityPenalty
        return cls(
            term["separation"],
            system.position_indices(ego),
            tuple(system.position_indices(j) for j in term["opponents"]),
        )
    if kind == "cube_signed_distance":
        return CubeSignedDistance(term["half_width"], system.position_indices(term.get("player", owner)))
    if kind == "quadratic_tracking":
        p = term.get("player", owner)
        return QuadraticTracking(
            tuple(_state_index(system, p, k) for k in term["index"]),
            tuple(term["target"]),
            tuple(term["weight"]),
        )
    if kind == "composite_sum":
        return CompositeSum(tuple((t["weight"], _build_term(t["term"], owner, system)) for t in term["terms"]))
    raise ValueError(f"unknown cost kind {kind!r}")


def _build_cost(block: dict, owner: int, system: ProductSystem) -> PlayerCost:
    return PlayerCost(_build_term(block["term"], owner, system), block["aggregation"], block["epsilon"])


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _check_term(ck: _Checker, term, path, owner, players):
    term = dict(ck.mapping(term, path))
    kind = ck.choice(term.get("kind"), path + ("kind",), _TERM_KINDS)
    n = len(players)

    def player_ref(value, p):
        ck.integer(value, p)
        if not 0 <= value < n:
            ck.fail(p, f"player {value} does not exist (scenario has {n} players, indices 0..{n - 1})")
        return value

    def positions_of(j, p):
        model = players[j].model
        if not MODELS[model].position_indices:
            ck.fail(p, f"player {j} ({model}) has no position coordinates")
        return len(MODELS[model].position_indices)

    if kind in ("proximity_avoid", "proximity_penalty"):
        ck.unknown(term, {"kind", "separation", "opponents", "ego"}, path)
        if "separation" not in term:
            ck.fail(path + ("separation",), "required")
        term["separation"] = ck.number(term["separation"], path + ("separation",), positive=True)
        ego = player_ref(term.get("ego", owner), path + ("ego",))
        if "ego" in term:
            term["ego"] = ego
        opps = ck.sequence(term.get("opponents"), path + ("opponents",))
        if not opps:
            ck.fail(path + ("opponents",), "needs at least one opposing player")
        dim = positions_of(ego, path + ("ego",))
        out = []
        for k, j in enumerate(opps):
            j = player_ref(j, path + ("opponents", k))
            if j == ego:
                ck.fail(path + ("opponents", k), "a player cannot oppose itself")
            if positions_of(j, path + ("opponents", k)) != dim:
                ck.fail(path + ("opponents", k), "position dimension differs from the ego's")
            out.append(j)
        term["opponents"] = out
    elif kind == "cube_signed_distance":
        ck.unknown(term, {"kind", "half_width", "player"}, path)
        term["half_width"] = ck.number(term.get("half_width"), path + ("half_width",), positive=True)
        if "player" in term:
            term["player"] = player_ref(term["player"], path + ("player",))
    elif kind == "quadratic_tracking":
        ck.unknown(term, {"kind", "index", "target", "weight", "player"}, path)
        p = player_ref(term.get("player", owner), path + ("player",))
        if "player" in term:
            term["player"] = p
        dim = MODELS[players[p].model].state_dim
        idx = [ck.integer(v, path + ("index", k), 0, dim - 1) for k, v in enumerate(ck.sequence(term.get("index"), path + ("index",)))]
        if not idx:
            ck.fail(path + ("index",), "needs at least one state index")
        tgt = [ck.number(v, path + ("target", k)) for k, v in enumerate(ck.sequence(term.get("target"), path + ("target",), len(idx)))]
        w = [ck.number(v, path + ("weight", k), nonneg=True) for k, v in enumerate(ck.sequence(term.get("weight"), path + ("weight",), len(idx)))]
        term.update(index=idx, target=tgt, weight=w)
    else:
        ck.unknown(term, {"kind", "terms"}, path)
        parts = ck.sequence(term.get("terms"), path + ("terms",))
        if not parts:
            ck.fail(path + ("terms",), "needs at least one term")
        out = []
        for k, part in enumerate(parts):
            pp = path + ("terms", k)
            part = ck.mapping(part, pp)
            ck.unknown(part, {"weight", "term"}, pp)
            out.append(
                {
                    "weight": ck.number(part.get("weight", 1.0), pp + ("weight",), nonneg=True),
                    "term": _check_term(ck, part.get("term"), pp + ("term",), owner, players),
                }
            )
        term["terms"] = out
    return term


def _check_cost(ck: _Checker, block, path, owner, players):
    block = dict(ck.mapping(block, path))
    ck.unknown(block, {"aggregation", "epsilon", "term"}, path)
    agg = ck.choice(block.get("aggregation", "max"), path + ("aggregation",), ("sum", "max", "min"))
    eps = ck.number(block.get("epsilon", 0.1), path + ("epsilon",), nonneg=True)
    if "term" not in block:
        ck.fail(path + ("term",), "required")
    return {"aggregation": agg, "epsilon": eps, "term": _check_term(ck, block["term"], path + ("term",), owner, players)}


def validate(data: Any, node=None, source: str | None = None) -> Scenario:
    """Validate a parsed scenario document (see module docstring)."""
    ck = _Checker(node, source)
    data = ck.mapping(data, ())
    ck.unknown(
        data,
        {"name", "description", "seed", "dt", "horizon", "run_mode", "players", "costs", "solver", "sweep", "receding_horizon", "verify_nash"},
        (),
    )
    name = data.get("name")
    if not isinstance(name, str) or not name:
        ck.fail(("name",), "required non-empty string")
    description = data.get("description", "")
    if not isinstance(description, str):
        ck.fail(("description",), "must be a string")
    seed = ck.integer(data.get("seed", 0), ("seed",), 0)
    dt = ck.number(data.get("dt", 0.1), ("dt",), positive=True)
    horizon = ck.number(data.get("horizon", 2.0), ("horizon",), positive=True)
    steps = horizon / dt
    if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
        ck.fail(("horizon",), f"must be a positive integer multiple of dt ({dt})")
    run_mode = ck.choice(data.get("run_mode", "solve"), ("run_mode",), RUN_MODES)

    players = []
    raw_players = ck.sequence(data.get("players"), ("players",))
    if not raw_players:
        ck.fail(("players",), "needs at least one player")
    for i, p in enumerate(raw_players):
        path = ("players", i)
        p = ck.mapping(p, path)
        ck.unknown(p, {"name", "model", "params", "initial_state"}, path)
        model = ck.choice(p.get("model"), path + ("model",), tuple(MODELS))
        params = dict(ck.mapping(p.get("params", {}) or {}, path + ("params",)))
        allowed = {f.name for f in fields(MODELS[model])}
        for k, v in params.items():
            if k not in allowed:
                ck.fail(path + ("params", k), f"unknown parameter for {model} (allowed: {', '.join(sorted(allowed)) or 'none'})")
            params[k] = ck.number(v, path + ("params", k), positive=True)
        dim = MODELS[model].state_dim
        x0 = ck.sequence(p.get("initial_state"), path + ("initial_state",), dim)
        x0 = tuple(ck.number(v, path + ("initial_state", k)) for k, v in enumerate(x0))
        pname = p.get("name", f"player{i}")
        if not isinstance(pname, str):
            ck.fail(path + ("name",), "must be a string")
        players.append(PlayerSpec(pname, model, params, x0))

    raw_costs = ck.sequence(data.get("costs"), ("costs",))
    if len(raw_costs) != len(players):
        ck.fail(("costs",), f"expected one cost block per player ({len(players)}), got {len(raw_costs)}")
    costs = tuple(_check_cost(ck, c, ("costs", i), i, players) for i, c in enumerate(raw_costs))

    solver = dict(ck.mapping(data.get("solver", {}) or {}, ("solver",)))
    ck.unknown(solver, _SOLVER_FIELDS, ("solver",))
    for k, v in list(solver.items()):
        if k == "epsilon_schedule":
            if v is not None:
                solver[k] = [ck.number(e, ("solver", k, j), positive=True) for j, e in enumerate(ck.sequence(v, ("solver", k)))]
        elif k == "tie_handling":
            if not isinstance(v, bool):
                ck.fail(("solver", k), "must be true or false")
        elif k in ("max_iterations", "tie_window"):
            solver[k] = ck.integer(v, ("solver", k), 1)
        elif v is not None:
            solver[k] = ck.number(v, ("solver", k), positive=True)
    try:
        SolverConfig(**{k: (tuple(v) if k == "epsilon_schedule" and v is not None else v) for k, v in solver.items()})
    except ValueError as err:
        ck.fail(("solver",), str(err))

    sweep = data.get("sweep")
    if sweep is not None:
        sweep = ck.mapping(sweep, ("sweep",))
        ck.unknown(sweep, {"epsilons"}, ("sweep",))
        eps = [ck.number(e, ("sweep", "epsilons", j), positive=True) for j, e in enumerate(ck.sequence(sweep.get("epsilons"), ("sweep", "epsilons")))]
        if not eps:
            ck.fail(("sweep", "epsilons"), "needs at least one value")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            ck.fail(("sweep", "epsilons"), "must be strictly decreasing")
        sweep = {"epsilons": eps}
    if run_mode == "sweep" and sweep is None:
        ck.fail(("sweep",), "required when run_mode is sweep")

    rh = data.get("receding_horizon")
    if rh is not None:
        path = ("receding_horizon",)
        rh = dict(ck.mapping(rh, path))
        ck.unknown(
            rh,
            {"ego", "total_duration", "planning_horizon", "replan_interval", "safety_threshold", "warm_start", "compare_nominal", "safety_costs"},
            path,
        )
        ego = ck.integer(rh.get("ego", 0), path + ("ego",), 0, len(players) - 1)
        if "total_duration" not in rh:
            ck.fail(path + ("total_duration",), "required")
        out = {
            "ego": ego,
            "total_duration": ck.number(rh["total_duration"], path + ("total_duration",), positive=True),
            "planning_horizon": ck.number(rh.get("planning_horizon", horizon), path + ("planning_horizon",), positive=True),
            "replan_interval": ck.number(rh.get("replan_interval", dt), path + ("replan_interval",), positive=True),
            "safety_threshold": ck.number(rh.get("safety_threshold", 0.0), path + ("safety_threshold",)),
        }
        for flag in ("warm_start", "compare_nominal"):
            v = rh.get(flag, True)
            if not isinstance(v, bool):
                ck.fail(path + (flag,), "must be true or false")
            out[flag] = v
        sc = ck.mapping(rh.get("safety_costs"), path + ("safety_costs",))
        checked = {}
        for k, block in sc.items():
            idx = ck.integer(k, path + ("safety_costs", k), 0, len(players) - 1)
            checked[idx] = _check_cost(ck, block, path + ("safety_costs", k), idx, players)
        if ego not in checked:
            ck.fail(path + ("safety_costs",), f"needs a safety cost for the ego player {ego}")
        if checked[ego]["aggregation"] == "sum":
            ck.fail(path + ("safety_costs", ego, "aggregation"), "the ego's safety cost must use max or min")
        out["safety_costs"] = dict(sorted(checked.items()))
        try:
            RecedingHorizonConfig(
                total_duration=out["total_duration"],
                planning_horizon=out["planning_horizon"],
                replan_interval=out["replan_interval"],
            ).schedule(dt)
        except ValueError as err:
            ck.fail(path, str(err))
        rh = out
    if run_mode == "receding_horizon":
        if rh is None:
            ck.fail(("receding_horizon",), "required when run_mode is receding_horizon")
        for i, c in enumerate(costs):
            if c["aggregation"] != "sum":
                ck.fail(("costs", i, "aggregation"), "nominal costs of a receding-horizon scenario must use sum")

    vn = data.get("verify_nash")
    if vn is not None:
        vn = ck.mapping(vn, ("verify_nash",))
        ck.unknown(vn, {"perturbations", "radius"}, ("verify_nash",))
        vn = {
            "perturbations": ck.integer(vn.get("perturbations", 50), ("verify_nash", "perturbations"), 0),
            "radius": ck.number(vn.get("radius", 1e-3), ("verify_nash", "radius"), nonneg=True),
        }

    return Scenario(
        name=name,
        description=description,
        seed=seed,
        dt=dt,
        horizon=horizon,
        run_mode=run_mode,
        players=tuple(players),
        costs=costs,
        solver=solver,
        sweep=sweep,
        receding_horizon=rh,
        verify_nash=vn,
    )


def loads(text: str, source: str | None = None) -> Scenario:
    """Parse and validate scenario text."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioError("", f"YAML parse error: {getattr(err, 'problem', err)}", line, source) from err
    return validate(data, node, source)


def bundled_names() -> list[str]:
    root = resources.files(__package__) / "scenarios"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_scenario(path_or_name: str | Path) -> Scenario:
    """Load a scenario file, or a bundled scenario by name."""
    path = Path(path_or_name)
    if path.is_file():
        return loads(path.read_text(), str(path))
    name = str(path_or_name)
    if name in bundled_names():
        res = resources.files(__package__) / "scenarios" / f"{name}.yaml"
        return loads(res.read_text(), f"{name}.yaml")
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name!r} (bundled: {', '.join(bundled_names())})")
