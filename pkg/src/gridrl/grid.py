"""Static grid model, topology state and the per-line topology action algebra.

Buses are encoded as small integers: ``DISCONNECTED = 0``, ``BUS1 = 1`` and
``BUS2 = 2``.  Elements are addressed by their position in the sorted id list
of their class, so for the bundled grids ids and indices coincide.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

DISCONNECTED = 0
BUS1 = 1
BUS2 = 2

DEFAULT_COOLDOWN = 3
ACTIONS_PER_LINE = 5

DATA_DIR = Path(__file__).parent / "data"


class GridSpecError(ValueError):
    """Raised when a grid spec file fails to parse or validate."""


class IllegalActionError(ValueError):
    pass


@dataclass(frozen=True)
class LineDef:
    id: int
    origin: int
    extremity: int
    x: float
    thermal_limit: float


@dataclass(frozen=True)
class GenDef:
    id: int
    substation: int
    p_max: float
    kind: str = "thermal"


@dataclass(frozen=True)
class LoadDef:
    id: int
    substation: int
    p_nominal: float = 0.0


@dataclass(frozen=True)
class SubstationDef:
    id: int
    lines_or: tuple
    lines_ex: tuple
    gens: tuple
    loads: tuple

    @property
    def n_elements(self) -> int:
        return len(self.lines_or) + len(self.lines_ex) + len(self.gens) + len(self.loads)


@dataclass(frozen=True, eq=False)
class Grid:
    name: str
    substations: tuple
    lines: tuple
    generators: tuple
    loads: tuple
    slack_gen: int

    @property
    def n_sub(self) -> int:
        return len(self.substations)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @cached_property
    def line_or_sub(self) -> np.ndarray:
        return _frozen(np.array([ln.origin for ln in self.lines], dtype=np.intp))

    @cached_property
    def line_ex_sub(self) -> np.ndarray:
        return _frozen(np.array([ln.extremity for ln in self.lines], dtype=np.intp))

    @cached_property
    def line_x(self) -> np.ndarray:
        return _frozen(np.array([ln.x for ln in self.lines], dtype=np.float64))

    @cached_property
    def thermal_limit(self) -> np.ndarray:
        return _frozen(np.array([ln.thermal_limit for ln in self.lines], dtype=np.float64))

    @cached_property
    def gen_sub(self) -> np.ndarray:
        return _frozen(np.array([g.substation for g in self.generators], dtype=np.intp))

    @cached_property
    def gen_pmax(self) -> np.ndarray:
        return _frozen(np.array([g.p_max for g in self.generators], dtype=np.float64))

    @cached_property
    def load_sub(self) -> np.ndarray:
        return _frozen(np.array([d.substation for d in self.loads], dtype=np.intp))

    @cached_property
    def load_nominal(self) -> np.ndarray:
        return _frozen(np.array([d.p_nominal for d in self.loads], dtype=np.float64))

    def initial_state(self, cooldown: int = DEFAULT_COOLDOWN) -> "TopologyState":
        """The all-BUS1, all-connected reference configuration."""
        L, G, D, S = self.n_line, self.n_gen, self.n_load, self.n_sub
        return TopologyState(
            line_or_bus=np.full(L, BUS1, dtype=np.int8),
            line_ex_bus=np.full(L, BUS1, dtype=np.int8),
            gen_bus=np.full(G, BUS1, dtype=np.int8),
            load_bus=np.full(D, BUS1, dtype=np.int8),
            sub_cooldown=np.zeros(S, dtype=np.int32),
            line_cooldown=np.zeros(L, dtype=np.int32),
            overflow_count=np.zeros(L, dtype=np.int32),
            cooldown=cooldown,
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TopologyState:
    """Per-element bus assignment plus cooldown and overflow counters.

    Treated as an immutable value: arrays are made read-only on construction
    and every transition goes through :meth:`replace`.
    """

    line_or_bus: np.ndarray
    line_ex_bus: np.ndarray
    gen_bus: np.ndarray
    load_bus: np.ndarray
    sub_cooldown: np.ndarray
    line_cooldown: np.ndarray
    overflow_count: np.ndarray
    cooldown: int = DEFAULT_COOLDOWN

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v.setflags(write=False)

    @property
    def line_status(self) -> np.ndarray:
        return (self.line_or_bus != DISCONNECTED) & (self.line_ex_bus != DISCONNECTED)

    def replace(self, **changes) -> "TopologyState":
        return dataclasses.replace(self, **changes)

    def equals(self, other: "TopologyState") -> bool:
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in dataclasses.fields(self)
        )

    def check_invariants(self) -> None:
        or_d = self.line_or_bus == DISCONNECTED
        ex_d = self.line_ex_bus == DISCONNECTED
        if np.any(or_d != ex_d):
            raise AssertionError("line with exactly one disconnected endpoint")
        for name in ("sub_cooldown", "line_cooldown", "overflow_count"):
            if np.any(getattr(self, name) < 0):
                raise AssertionError(f"negative {name}")


class ActionKind(IntEnum):
    NOOP = 0
    SET_ENDPOINT = 1
    RECONNECT_LINE = 2


ORIGIN = 0
EXTREMITY = 1


@dataclass(frozen=True, order=True)
class Action:
    kind: ActionKind = ActionKind.NOOP
    line: int = -1
    end: int = -1
    bus: int = -1
    bus_or: int = -1
    bus_ex: int = -1

    @staticmethod
    def noop() -> "Action":
        return NOOP

    @staticmethod
    def set_endpoint(line: int, end: int, bus: int) -> "Action":
        return Action(ActionKind.SET_ENDPOINT, line, end=end, bus=bus)

    @staticmethod
    def reconnect(line: int, bus_or: int, bus_ex: int) -> "Action":
        return Action(ActionKind.RECONNECT_LINE, line, bus_or=bus_or, bus_ex=bus_ex)

    @property
    def is_noop(self) -> bool:
        return self.kind == ActionKind.NOOP

    def __str__(self) -> str:
        if self.kind == ActionKind.NOOP:
            return "noop"
        if self.kind == ActionKind.SET_ENDPOINT:
            return f"set(l{self.line},{'or' if self.end == ORIGIN else 'ex'}->{self.bus})"
        return f"reconnect(l{self.line},{self.bus_or},{self.bus_ex})"


NOOP = Action()


def line_action(line: int, index: int, connected: bool) -> Action:
    """Map a per-line action slot (0..4) to a concrete action.

    Slot 0 is NOOP.  For a connected line slots 1..4 are origin->1, origin->2,
    extremity->1, extremity->2; for a disconnected line they are the four
    reconnections with (origin bus, extremity bus) in {1,2}^2.
    """
    if index == 0:
        return NOOP
    k = index - 1
    if connected:
        return Action.set_endpoint(line, ORIGIN if k < 2 else EXTREMITY, BUS1 + (k % 2))
    return Action.reconnect(line, BUS1 + k // 2, BUS1 + k % 2)


def action_index(action: Action) -> int:
    if action.kind == ActionKind.NOOP:
        return 0
    if action.kind == ActionKind.SET_ENDPOINT:
        return 1 + 2 * action.end + (action.bus - BUS1)
    return 1 + 2 * (action.bus_or - BUS1) + (action.bus_ex - BUS1)


def legal_mask(grid: Grid, state: TopologyState, line: int) -> np.ndarray:
    """Boolean mask over the 5 action slots of ``line``; slot 0 always legal."""
    if not 0 <= line < grid.n_line:
        raise IndexError(f"unknown line {line}")
    mask = np.zeros(ACTIONS_PER_LINE, dtype=bool)
    mask[0] = True
    connected = state.line_or_bus[line] != DISCONNECTED
    if connected:
        for end, sub, cur in (
            (ORIGIN, grid.line_or_sub[line], state.line_or_bus[line]),
            (EXTREMITY, grid.line_ex_sub[line], state.line_ex_bus[line]),
        ):
            if state.sub_cooldown[sub] > 0:
                continue
            for bus in (BUS1, BUS2):
                if bus != cur:
                    mask[1 + 2 * end + bus - BUS1] = True
    elif state.line_cooldown[line] == 0:
        mask[1:] = True
    return mask


def legal_actions(grid: Grid, state: TopologyState, line: int) -> list[Action]:
    mask = legal_mask(grid, state, line)
    connected = bool(state.line_or_bus[line] != DISCONNECTED)
    return [line_action(line, i, connected) for i in np.flatnonzero(mask)]


def is_legal(grid: Grid, state: TopologyState, action: Action) -> bool:
    if action.kind == ActionKind.NOOP:
        return True
    if not 0 <= action.line < grid.n_line:
        return False
    mask = legal_mask(grid, state, action.line)
    connected = bool(state.line_or_bus[action.line] != DISCONNECTED)
    idx = action_index(action)
    if not mask[idx]:
        return False
    return line_action(action.line, idx, connected) == action


def apply_action(state: TopologyState, action: Action, grid: Grid) -> TopologyState:
    if action.kind == ActionKind.NOOP:
        return state
    if not is_legal(grid, state, action):
        raise IllegalActionError(f"illegal action {action}")
    line = action.line
    if action.kind == ActionKind.SET_ENDPOINT:
        if action.end == ORIGIN:
            buses, sub, name = state.line_or_bus.copy(), grid.line_or_sub[line], "line_or_bus"
        else:
            buses, sub, name = state.line_ex_bus.copy(), grid.line_ex_sub[line], "line_ex_bus"
        buses[line] = action.bus
        cd = state.sub_cooldown.copy()
        cd[sub] = state.cooldown
        return state.replace(**{name: buses, "sub_cooldown": cd})
    or_bus = state.line_or_bus.copy()
    ex_bus = state.line_ex_bus.copy()
    or_bus[line] = action.bus_or
    ex_bus[line] = action.bus_ex
    lcd = state.line_cooldown.copy()
    lcd[line] = state.cooldown
    return state.replace(line_or_bus=or_bus, line_ex_bus=ex_bus, line_cooldown=lcd)


def disconnect_lines(state: TopologyState, lines: np.ndarray) -> TopologyState:
    """Force-disconnect ``lines`` (overload protection), arming their cooldown."""
    or_bus = state.line_or_bus.copy()
    ex_bus = state.line_ex_bus.copy()
    lcd = state.line_cooldown.copy()
    oc = state.overflow_count.copy()
    or_bus[lines] = DISCONNECTED
    ex_bus[lines] = DISCONNECTED
    lcd[lines] = state.cooldown
    oc[lines] = 0
    return state.replace(line_or_bus=or_bus, line_ex_bus=ex_bus, line_cooldown=lcd, overflow_count=oc)


# ---------------------------------------------------------------------------
# grid spec files


def _require(entry: dict, key: str, kind: str, ident) -> object:
    if key not in entry:
        raise GridSpecError(f"{kind} {ident}: missing field '{key}'")
    return entry[key]


def _ids(entries: list, kind: str) -> list:
    ids = []
    for e in entries:
        if not isinstance(e, dict) or "id" not in e:
            raise GridSpecError(f"{kind} entry without id: {e!r}")
        ids.append(int(e["id"]))
    seen = set()
    for i in ids:
        if i in seen:
            raise GridSpecError(f"{kind} {i}: duplicate id")
        seen.add(i)
    return ids


def grid_from_dict(spec: dict) -> Grid:
    """Validate a parsed grid spec and build a :class:`Grid`.

    Elements are re-ordered by id; references to substations are by id.
    """
    if not isinstance(spec, dict):
        raise GridSpecError("grid spec must be a mapping")
    for key in ("substations", "lines", "generators", "loads", "slack_gen"):
        if key not in spec:
            raise GridSpecError(f"missing top-level key '{key}'")

    subs_raw = spec["substations"]
    if isinstance(subs_raw, int):
        subs_raw = [{"id": i} for i in range(subs_raw)]
    sub_ids = sorted(_ids(subs_raw, "substation"))
    sub_index = {sid: k for k, sid in enumerate(sub_ids)}

    def sub_ref(entry, key, kind):
        ref = int(_require(entry, key, kind, entry["id"]))
        if ref not in sub_index:
            raise GridSpecError(f"{kind} {entry['id']}: unknown substation {ref}")
        return sub_index[ref]

    lines_raw = sorted(spec["lines"], key=lambda e: int(e["id"]) if isinstance(e, dict) and "id" in e else -1)
    _ids(lines_raw, "line")
    lines = []
    for e in lines_raw:
        o, x_ = sub_ref(e, "origin", "line"), sub_ref(e, "extremity", "line")
        if o == x_:
            raise GridSpecError(f"line {e['id']}: origin equals extremity")
        x = float(_require(e, "x", "line", e["id"]))
        lim = float(_require(e, "thermal_limit", "line", e["id"]))
        if not x > 0:
            raise GridSpecError(f"line {e['id']}: non-positive reactance {x}")
        if not lim > 0:
            raise GridSpecError(f"line {e['id']}: non-positive thermal limit {lim}")
        lines.append(LineDef(int(e["id"]), o, x_, x, lim))

    gens_raw = sorted(spec["generators"], key=lambda e: int(e.get("id", -1)))
    _ids(gens_raw, "generator")
    gens = []
    for e in gens_raw:
        pmax = float(_require(e, "p_max", "generator", e["id"]))
        if not pmax > 0:
            raise GridSpecError(f"generator {e['id']}: non-positive p_max {pmax}")
        gens.append(GenDef(int(e["id"]), sub_ref(e, "substation", "generator"), pmax, str(e.get("kind", "thermal"))))

    loads_raw = sorted(spec["loads"], key=lambda e: int(e.get("id", -1)))
    _ids(loads_raw, "load")
    loads = [LoadDef(int(e["id"]), sub_ref(e, "substation", "load"), float(e.get("p_nominal", 0.0))) for e in loads_raw]

    gen_ids = [g.id for g in gens]
    slack_id = int(spec["slack_gen"])
    if slack_id not in gen_ids:
        raise GridSpecError(f"slack_gen {slack_id}: unknown generator")
    if not lines:
        raise GridSpecError("grid has no lines")

    subs = []
    for k, sid in enumerate(sub_ids):
        subs.append(SubstationDef(
            sid,
            tuple(i for i, ln in enumerate(lines) if ln.origin == k),
            tuple(i for i, ln in enumerate(lines) if ln.extremity == k),
            tuple(i for i, g in enumerate(gens) if g.substation == k),
            tuple(i for i, d in enumerate(loads) if d.substation == k),
        ))
    return Grid(
        name=str(spec.get("name", "grid")),
        substations=tuple(subs),
        lines=tuple(lines),
        generators=tuple(gens),
        loads=tuple(loads),
        slack_gen=gen_ids.index(slack_id),
    )


def load_grid(path) -> Grid:
    """Load a grid spec (YAML).  ``"case14"`` resolves to the bundled grid."""
    path = Path(path)
    if not path.exists() and (DATA_DIR / f"{path.name}.yaml").exists():
        path = DATA_DIR / f"{path.name}.yaml"
    try:
        spec = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise GridSpecError(f"{path}: parse error: {exc}") from exc
    return grid_from_dict(spec)


def grid_to_dict(grid: Grid) -> dict:
    sub_ids = [s.id for s in grid.substations]
    return {
        "name": grid.name,
        "substations": [{"id": s} for s in sub_ids],
        "lines": [
            {"id": ln.id, "origin": sub_ids[ln.origin], "extremity": sub_ids[ln.extremity],
             "x": ln.x, "thermal_limit": ln.thermal_limit}
            for ln in grid.lines
        ],
        "generators": [
            {"id": g.id, "substation": sub_ids[g.substation], "p_max": g.p_max, "kind": g.kind}
            for g in grid.generators
        ],
        "loads": [{"id": d.id, "substation": sub_ids[d.substation], "p_nominal": d.p_nominal} for d in grid.loads],
        "slack_gen": grid.generators[grid.slack_gen].id,
    }


def random_grid(rng: np.random.Generator, n_sub: int, n_line: int, n_gen: Optional[int] = None,
                n_load: Optional[int] = None) -> Grid:
    """Random connected test grid (spanning tree plus extra lines, parallels allowed)."""
    n_line = max(n_line, n_sub - 1)
    n_gen = n_gen if n_gen is not None else max(1, n_sub // 3)
    n_load = n_load if n_load is not None else max(1, n_sub // 2)
    pairs = []
    order = rng.permutation(n_sub)
    for k in range(1, n_sub):
        pairs.append((int(order[k]), int(order[rng.integers(0, k)])))
    while len(pairs) < n_line:
        a, b = rng.choice(n_sub, size=2, replace=False)
        pairs.append((int(a), int(b)))
    spec = {
        "substations": n_sub,
        "lines": [
            {"id": i, "origin": a, "extremity": b, "x": float(rng.uniform(0.05, 0.5)),
             "thermal_limit": float(rng.uniform(0.5, 2.0))}
            for i, (a, b) in enumerate(pairs)
        ],
        "generators": [
            {"id": i, "substation": int(rng.integers(n_sub)), "p_max": float(rng.uniform(1.0, 3.0))}
            for i in range(n_gen)
        ],
        "loads": [
            {"id": i, "substation": int(rng.integers(n_sub)), "p_nominal": float(rng.uniform(0.1, 0.5))}
            for i in range(n_load)
        ],
        "slack_gen": 0,
    }
    return grid_from_dict(spec)
