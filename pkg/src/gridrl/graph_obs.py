"""Homogeneous line-graph observation.

Every grid element gets a one-hot-like feature vector of width ``D = 7``
laid out as ``[gen (2) | load (2) | line end (3)]``.  Element vectors are
summed per (substation, bus) into bus embeddings; a substation embedding is
``[bus 1 | bus 2 | disconnected]`` (width ``3D``); the node feature of a power
line is ``[origin substation | extremity substation]`` (width ``6D``).  Two
line nodes are adjacent when the lines share a substation.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import BUS1, BUS2, DISCONNECTED, Grid

D_GEN = 2
D_LOAD = 2
D_LINEEND = 3
D = D_GEN + D_LOAD + D_LINEEND
GEN_SLOTS = slice(0, D_GEN)
LOAD_SLOTS = slice(D_GEN, D_GEN + D_LOAD)
LINEEND_SLOTS = slice(D_GEN + D_LOAD, D)
SUB_WIDTH = 3 * D
NODE_WIDTH = 6 * D

_SEGMENT = {BUS1: 0, BUS2: 1, DISCONNECTED: 2}


@dataclass(frozen=True, eq=False)
class LineGraph:
    node_features: np.ndarray  # (L, 6D)
    adjacency: np.ndarray  # (L, L) bool, symmetric, zero diagonal
    line_ids: tuple

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum()) // 2


@lru_cache(maxsize=32)
def _adjacency_cached(grid: Grid) -> np.ndarray:
    L = grid.n_line
    inc = np.zeros((L, grid.n_sub), dtype=np.int64)
    inc[np.arange(L), grid.line_or_sub] = 1
    inc[np.arange(L), grid.line_ex_sub] = 1
    adj = (inc @ inc.T) > 0
    np.fill_diagonal(adj, False)
    adj.setflags(write=False)
    return adj


def line_adjacency(grid: Grid) -> np.ndarray:
    """Line-graph adjacency; depends only on the static grid, so it is cached."""
    return _adjacency_cached(grid)


def _total_load(state) -> float:
    total = float(state.solution.load_p[state.topology.load_bus != DISCONNECTED].sum())
    return total if total > 0 else 1.0


def encode_gen(state, g: int) -> np.ndarray:
    v = np.zeros(D)
    if state.topology.gen_bus[g] != DISCONNECTED:
        p = state.solution.gen_p[g]
        v[0] = p / state.grid.gen_pmax[g]
        v[1] = p / _total_load(state)
    return v


def encode_load(state, d: int) -> np.ndarray:
    v = np.zeros(D)
    if state.topology.load_bus[d] != DISCONNECTED:
        v[2] = state.solution.load_p[d] / _total_load(state)
        v[3] = 1.0
    return v


def encode_line_end(state, line: int, end: int) -> np.ndarray:
    """``(signed flow leaving the substation / limit, rho, status)`` at one end."""
    v = np.zeros(D)
    bus = state.topology.line_or_bus[line] if end == 0 else state.topology.line_ex_bus[line]
    if bus != DISCONNECTED:
        f = state.solution.line_flow[line] / state.grid.thermal_limit[line]
        v[4] = f if end == 0 else -f
        v[5] = state.solution.rho[line]
        v[6] = 1.0
    return v


def encode_element(state, kind: str, index: int, end: int = 0) -> np.ndarray:
    """Feature vector of one element; ``kind`` in {"gen", "load", "line"}."""
    if kind == "gen":
        return encode_gen(state, index)
    if kind == "load":
        return encode_load(state, index)
    if kind == "line":
        return encode_line_end(state, index, end)
    raise ValueError(f"unknown element kind {kind!r}")


def _element_table(state):
    """All element features with their (substation, segment) slot, vectorised."""
    grid, topo, sol = state.grid, state.topology, state.solution
    L, G, Dn = grid.n_line, grid.n_gen, grid.n_load
    total = _total_load(state)
    feats = np.zeros((2 * L + G + Dn, D))
    subs = np.concatenate([grid.line_or_sub, grid.line_ex_sub, grid.gen_sub, grid.load_sub])
    buses = np.concatenate([topo.line_or_bus, topo.line_ex_bus, topo.gen_bus, topo.load_bus]).astype(np.intp)

    f = sol.line_flow / grid.thermal_limit
    on_or = topo.line_or_bus != DISCONNECTED
    on_ex = topo.line_ex_bus != DISCONNECTED
    feats[:L, 4] = np.where(on_or, f, 0.0)
    feats[:L, 5] = np.where(on_or, sol.rho, 0.0)
    feats[:L, 6] = on_or
    feats[L:2 * L, 4] = np.where(on_ex, -f, 0.0)
    feats[L:2 * L, 5] = np.where(on_ex, sol.rho, 0.0)
    feats[L:2 * L, 6] = on_ex

    g_on = topo.gen_bus != DISCONNECTED
    gp = np.where(g_on, sol.gen_p, 0.0)
    feats[2 * L:2 * L + G, 0] = gp / grid.gen_pmax
    feats[2 * L:2 * L + G, 1] = gp / total

    d_on = topo.load_bus != DISCONNECTED
    feats[2 * L + G:, 2] = np.where(d_on, sol.load_p / total, 0.0)
    feats[2 * L + G:, 3] = d_on
    segment = np.where(buses == DISCONNECTED, 2, buses - 1)
    return feats, subs, segment


def substation_embeddings(state) -> np.ndarray:
    """(S, 3D) matrix of substation embeddings."""
    feats, subs, segment = _element_table(state)
    emb = np.zeros((state.grid.n_sub, 3, D))
    np.add.at(emb, (subs, segment), feats)
    return emb.reshape(state.grid.n_sub, SUB_WIDTH)


def bus_embedding(state, substation: int, bus: int) -> np.ndarray:
    """Sum of the features of elements on ``(substation, bus)``; ``bus`` may be DISCONNECTED."""
    seg = _SEGMENT[bus]
    return substation_embeddings(state)[substation, seg * D:(seg + 1) * D]


def substation_embedding(state, substation: int) -> np.ndarray:
    return substation_embeddings(state)[substation]


def node_features(state) -> np.ndarray:
    sub = substation_embeddings(state)
    grid = state.grid
    return np.concatenate([sub[grid.line_or_sub], sub[grid.line_ex_sub]], axis=1)


def build_line_graph(state) -> LineGraph:
    grid = state.grid
    return LineGraph(
        node_features=node_features(state),
        adjacency=line_adjacency(grid),
        line_ids=tuple(ln.id for ln in grid.lines),
    )


def brute_force_adjacency(grid: Grid) -> np.ndarray:
    """O(L^2) shared-substation check; reference for :func:`line_adjacency`."""
    L = grid.n_line
    adj = np.zeros((L, L), dtype=bool)
    for i in range(L):
        ends_i = {grid.lines[i].origin, grid.lines[i].extremity}
        for j in range(L):
            if i != j and ends_i & {grid.lines[j].origin, grid.lines[j].extremity}:
                adj[i, j] = True
    return adj


def write_graph_csv(graph: LineGraph, edges_path, features_path) -> None:
    L = graph.n_nodes
    with open(edges_path, "w") as fh:
        fh.write("source,target\n")
        for i in range(L):
            for j in range(i + 1, L):
                if graph.adjacency[i, j]:
                    fh.write(f"{graph.line_ids[i]},{graph.line_ids[j]}\n")
    cols = [f"{side}_{seg}_{k}" for side in ("or", "ex") for seg in ("bus1", "bus2", "disc") for k in range(D)]
    with open(features_path, "w") as fh:
        fh.write("line," + ",".join(cols) + "\n")
        for i in range(L):
            fh.write(f"{graph.line_ids[i]}," + ",".join(repr(float(v)) for v in graph.node_features[i]) + "\n")
