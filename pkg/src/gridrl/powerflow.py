"""DC power flow over the topology-induced electrical graph."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .grid import BUS1, DISCONNECTED, Grid, TopologyState

DEFAULT_SLACK_TOLERANCE = 0.2

OK, UNSERVED_LOAD, SLACK_BOUNDS, SINGULAR = 0, 1, 2, 3


@dataclass(frozen=True)
class Injections:
    gen_p: np.ndarray
    load_p: np.ndarray
    t: int = 0


class NodeMap:
    """Electrical nodes: one per (substation, bus) pair holding a connected element.

    Numbering is substation-major, bus-minor.  Element-to-node arrays use -1
    for disconnected elements.
    """

    def __init__(self, grid: Grid, state: TopologyState, node_of: np.ndarray):
        self._grid = grid
        self._state = state
        self.node_of = node_of.reshape(grid.n_sub, 2)
        flat = np.flatnonzero(node_of >= 0)
        self.n_nodes = len(flat)
        self.node_sub = flat // 2
        self.node_bus = flat % 2 + BUS1

    def _elements(self, subs, buses):
        out = np.full(len(subs), -1, dtype=np.int64)
        on = buses != DISCONNECTED
        out[on] = self.node_of[subs[on], buses[on].astype(np.intp) - 1]
        return out

    @cached_property
    def line_or_node(self):
        return self._elements(self._grid.line_or_sub, self._state.line_or_bus)

    @cached_property
    def line_ex_node(self):
        return self._elements(self._grid.line_ex_sub, self._state.line_ex_bus)

    @cached_property
    def gen_node(self):
        return self._elements(self._grid.gen_sub, self._state.gen_bus)

    @cached_property
    def load_node(self):
        return self._elements(self._grid.load_sub, self._state.load_bus)


@dataclass(frozen=True, eq=False)
class FlowSolution:
    nodes: NodeMap
    node_angle: np.ndarray
    line_flow: np.ndarray
    rho: np.ndarray
    gen_p: np.ndarray  # generator output after slack absorption
    load_p: np.ndarray
    solvable: bool
    islands: np.ndarray  # island label per electrical node
    thermal_limit: np.ndarray
    status: int = OK
    culprit: int = -1

    @property
    def max_rho(self) -> float:
        return float(self.rho.max()) if self.rho.size else 0.0

    @property
    def reason(self) -> str:
        if self.status == UNSERVED_LOAD:
            return f"island {self.culprit} has load but no generator"
        if self.status == SLACK_BOUNDS:
            return f"slack generator {self.culprit} out of bounds ({self.gen_p[self.culprit]:.3f} pu)"
        if self.status == SINGULAR:
            return "singular reduced susceptance matrix"
        return ""

    def node_injection(self) -> np.ndarray:
        p = np.zeros(self.nodes.n_nodes)
        m = self.nodes.gen_node >= 0
        np.add.at(p, self.nodes.gen_node[m], self.gen_p[m])
        m = self.nodes.load_node >= 0
        np.add.at(p, self.nodes.load_node[m], -self.load_p[m])
        return p


def electrical_nodes(grid: Grid, state: TopologyState) -> NodeMap:
    S = grid.n_sub
    used = np.zeros((S, 2), dtype=bool)
    for subs, buses in (
        (grid.line_or_sub, state.line_or_bus),
        (grid.line_ex_sub, state.line_ex_bus),
        (grid.gen_sub, state.gen_bus),
        (grid.load_sub, state.load_bus),
    ):
        on = buses != DISCONNECTED
        used[subs[on], buses[on].astype(np.intp) - 1] = True
    flat = used.ravel()
    node_of = np.full(S * 2, -1, dtype=np.int64)
    node_of[flat] = np.arange(int(flat.sum()))
    return NodeMap(grid, state, node_of)


def dc_solve(grid: Grid, state: TopologyState, inj: Injections,
             slack_tolerance: float = DEFAULT_SLACK_TOLERANCE) -> FlowSolution:
    """Solve the DC power flow island by island.

    Each island with a generator gets a slack (the global slack if present,
    else its lowest-index generator) that absorbs the island imbalance.  An
    island holding load but no generator, a slack pushed outside
    ``[-tol * p_max, (1 + tol) * p_max]``, or a singular reduced matrix make
    the solution unsolvable.  Islands without generators carry no flow.
    """
    load_p = np.asarray(inj.load_p, dtype=np.float64)
    node_of, theta, flow, gen_out, labels, status, culprit = kernels.dc_network(
        grid.n_sub,
        grid.line_or_sub, grid.line_ex_sub, state.line_or_bus, state.line_ex_bus,
        grid.gen_sub, state.gen_bus, grid.load_sub, state.load_bus,
        grid.line_x, np.asarray(inj.gen_p, dtype=np.float64), grid.gen_pmax, load_p,
        grid.slack_gen, slack_tolerance,
    )
    return FlowSolution(
        nodes=NodeMap(grid, state, node_of),
        node_angle=theta,
        line_flow=flow,
        rho=np.abs(flow) / grid.thermal_limit,
        gen_p=gen_out,
        load_p=load_p,
        solvable=status == OK,
        islands=labels,
        thermal_limit=grid.thermal_limit,
        status=status,
        culprit=culprit,
    )


def load_ratios(sol: FlowSolution) -> np.ndarray:
    """``|flow| / limit`` per line; disconnected lines carry zero flow, hence zero."""
    return np.abs(sol.line_flow) / sol.thermal_limit
