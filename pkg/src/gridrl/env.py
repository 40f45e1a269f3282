"""Chronics-driven episode engine with overload protection and cascades."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import (
    DEFAULT_COOLDOWN,
    NOOP,
    Action,
    Grid,
    TopologyState,
    apply_action,
    disconnect_lines,
    is_legal,
)
from .powerflow import DEFAULT_SLACK_TOLERANCE, FlowSolution, Injections, dc_solve

MAX_HORIZON = 8064


class EnvError(ValueError):
    pass


class InvalidChronicError(EnvError):
    pass


@dataclass(frozen=True)
class EnvParams:
    cooldown: int = DEFAULT_COOLDOWN
    soft_overflow_steps: int = 3
    hard_overflow_ratio: float = 2.0
    blackout_penalty: float = 10.0
    slack_tolerance: float = DEFAULT_SLACK_TOLERANCE
    max_horizon: int = MAX_HORIZON


@dataclass(frozen=True, eq=False)
class Chronic:
    id: str
    gen_p: np.ndarray  # (T, G)
    load_p: np.ndarray  # (T, D)

    def __post_init__(self):
        for name in ("gen_p", "load_p"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 2:
                raise EnvError(f"chronic {self.id}: {name} must be 2-D")
            if not np.all(np.isfinite(a)):
                raise EnvError(f"chronic {self.id}: non-finite entries in {name}")
            if np.any(a < 0):
                raise EnvError(f"chronic {self.id}: negative entries in {name}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.gen_p.shape[0] != self.load_p.shape[0]:
            raise EnvError(f"chronic {self.id}: gen_p and load_p horizons differ")

    @property
    def horizon(self) -> int:
        return self.gen_p.shape[0]

    def injections(self, t: int) -> Injections:
        return Injections(self.gen_p[t], self.load_p[t], t)

    def truncated(self, horizon: int) -> "Chronic":
        return Chronic(self.id, self.gen_p[:horizon], self.load_p[:horizon])


@dataclass(frozen=True, eq=False)
class SimState:
    grid: Grid
    chronic: Chronic
    params: EnvParams
    topology: TopologyState
    solution: FlowSolution
    injections: Injections
    t: int = 0
    done: bool = False
    blackout: bool = False

    @property
    def rho(self) -> np.ndarray:
        return self.solution.rho

    @property
    def max_rho(self) -> float:
        return self.solution.max_rho

    @property
    def survive_time(self) -> int:
        """Operational steps so far; a blackout state does not count."""
        return self.t if self.blackout else self.t + 1


@dataclass(frozen=True, eq=False)
class StepOutcome:
    state: SimState
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def _check_shapes(grid: Grid, chronic: Chronic, params: EnvParams) -> None:
    if chronic.gen_p.shape[1] != grid.n_gen or chronic.load_p.shape[1] != grid.n_load:
        raise EnvError(
            f"chronic {chronic.id}: shape {chronic.gen_p.shape[1]} gens x {chronic.load_p.shape[1]} loads, "
            f"grid has {grid.n_gen} x {grid.n_load}"
        )
    if chronic.horizon < 2:
        raise EnvError(f"chronic {chronic.id}: horizon must be at least 2")
    if chronic.horizon > params.max_horizon:
        raise EnvError(f"chronic {chronic.id}: horizon {chronic.horizon} exceeds {params.max_horizon}")


def reset(grid: Grid, chronic: Chronic, params: Optional[EnvParams] = None) -> SimState:
    params = params or EnvParams()
    _check_shapes(grid, chronic, params)
    topo = grid.initial_state(params.cooldown)
    inj = chronic.injections(0)
    sol = dc_solve(grid, topo, inj, params.slack_tolerance)
    if not sol.solvable:
        raise InvalidChronicError(f"chronic {chronic.id}: initial state unsolvable ({sol.reason})")
    if np.any(sol.rho >= params.hard_overflow_ratio):
        raise InvalidChronicError(
            f"chronic {chronic.id}: initial flows exceed the hard overflow ratio on lines "
            f"{np.flatnonzero(sol.rho >= params.hard_overflow_ratio).tolist()}"
        )
    return SimState(grid, chronic, params, topo, sol, inj, 0, False, False)


def base_reward(state: SimState) -> float:
    if state.blackout:
        return -state.params.blackout_penalty
    if not state.rho.size:
        return 1.0
    r = np.minimum(state.rho, 1.0)
    return float(1.0 - np.mean(r * r))


def _transition(state: SimState, action: Action, row: int, advance: bool) -> StepOutcome:
    if state.done:
        raise EnvError("step called on a finished episode")
    grid, params = state.grid, state.params
    illegal = not is_legal(grid, state.topology, action)
    executed = NOOP if illegal else action
    topo = apply_action(state.topology, executed, grid)
    inj = state.chronic.injections(row)
    sol = dc_solve(grid, topo, inj, params.slack_tolerance)

    depth = 0
    tripped = []
    while sol.solvable:
        status = topo.line_status
        rho = sol.rho
        trip = status & (
            (rho >= params.hard_overflow_ratio)
            | ((rho > 1.0) & (topo.overflow_count + 1 >= params.soft_overflow_steps))
        )
        if not trip.any():
            break
        lines = np.flatnonzero(trip)
        tripped.extend(lines.tolist())
        topo = disconnect_lines(topo, lines)
        depth += 1
        sol = dc_solve(grid, topo, inj, params.slack_tolerance)

    overflow = np.where(sol.rho > 1.0, topo.overflow_count + 1, 0).astype(np.int32)
    topo = topo.replace(
        overflow_count=overflow,
        sub_cooldown=np.maximum(topo.sub_cooldown - 1, 0).astype(np.int32),
        line_cooldown=np.maximum(topo.line_cooldown - 1, 0).astype(np.int32),
    )
    blackout = not sol.solvable
    t = row if advance else state.t
    done = blackout or (advance and t + 1 >= state.chronic.horizon)
    nxt = SimState(grid, state.chronic, params, topo, sol, inj, t, done, blackout)
    info = {
        "rho": sol.rho,
        "tripped": tripped,
        "cascade_depth": depth,
        "illegal": illegal,
        "action": executed,
        "reason": sol.reason,
    }
    return StepOutcome(nxt, base_reward(nxt), done, info)


def step(state: SimState, action: Action = NOOP) -> StepOutcome:
    """Advance one step: act, load row t+1, solve, cascade, update counters.

    A line trips when its load ratio reaches the hard ratio, or when it is
    overloaded for the ``soft_overflow_steps``-th consecutive step.  Illegal
    actions are executed as NOOP and flagged in ``info``.
    """
    return _transition(state, action, state.t + 1, True)


def simulate(state: SimState, action: Action = NOOP) -> StepOutcome:
    """One-step lookahead with injections held at the current row."""
    return _transition(state, action, state.t, False)


def rollout(state: SimState, policy, log: Optional[list] = None) -> SimState:
    """Run ``policy(state) -> Action`` until the episode ends."""
    while not state.done:
        action = policy(state)
        out = step(state, action)
        if log is not None:
            log.append({
                "t": out.state.t,
                "action": str(out.info["action"]),
                "max_rho": out.state.max_rho,
                "reward": out.reward,
                "disconnections": " ".join(map(str, out.info["tripped"])),
            })
        state = out.state
    return state


def do_nothing_survival(grid: Grid, chronic: Chronic, params: Optional[EnvParams] = None) -> int:
    return rollout(reset(grid, chronic, params), lambda s: NOOP).survive_time


def write_episode_log(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["t", "action", "max_rho", "reward", "disconnections"])
        w.writeheader()
        w.writerows(rows)


def with_params(state: SimState, **changes) -> SimState:
    return dataclasses.replace(state, params=dataclasses.replace(state.params, **changes))
