"""Hierarchical graph-based reinforcement learning for power-grid topology control.

A DC power-flow simulator with two-bus substations drives chronic-based
episodes; a manager picks which per-line agent acts in danger states, and the
agents read a shared GNN embedding of the line graph.  See the README for the
command-line workflow.
"""
from .control import ControlSystem, act, collect_demonstrations, expert_action
from .env import Chronic, EnvParams, reset, simulate, step
from .graph_obs import build_line_graph
from .grid import NOOP, Action, Grid, load_grid
from .harness import RunConfig, evaluate, load_config, train
from .kernels import BACKEND as KERNEL_BACKEND
from .powerflow import dc_solve
from .rl import Hyperparams, ShapingMode

__version__ = "0.1.0"

__all__ = [
    "Action", "Chronic", "ControlSystem", "EnvParams", "Grid", "Hyperparams", "KERNEL_BACKEND", "NOOP",
    "RunConfig", "ShapingMode", "act", "build_line_graph", "collect_demonstrations", "dc_solve", "evaluate",
    "expert_action", "load_config", "load_grid", "reset", "simulate", "step", "train",
]
