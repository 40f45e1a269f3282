"""Run orchestration: configs, pretraining, training, evaluation, ablations, exports."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from .chronics import generate_synthetic, get_profile, load_chronics
from .control import (ControlSystem, EpisodeTrace, act, add_demos, collect_demonstrations,
                      expert_action, expert_candidate_count, is_danger, learn, load_demos,
                      restore_state, save_demos, trace_transitions, _snapshot)
from .env import Chronic, EnvParams, reset, step
from .graph_obs import D, build_line_graph, write_graph_csv
from .grid import NOOP, Grid, load_grid
from .nn import load_checkpoint, save_checkpoint, write_matrix_csv
from .rl import Hyperparams, ShapingMode

log = logging.getLogger("gridrl")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ChronicSource:
    """Either a directory of chronic folders or a seeded synthetic profile."""

    path: Optional[str] = None
    profile: str = "hard"
    seeds: tuple = tuple(range(10))
    horizon: int = 2016

    @classmethod
    def from_dict(cls, d) -> "ChronicSource":
        d = dict(d or {})
        if "seeds" in d:
            s = d["seeds"]
            d["seeds"] = tuple(range(s["start"], s["start"] + s["count"])) if isinstance(s, dict) else tuple(s)
        return cls(**d)

    def load(self, grid: Grid) -> list[Chronic]:
        if self.path is not None:
            return [c.truncated(self.horizon) if c.horizon > self.horizon else c
                    for c in load_chronics(self.path, grid)]
        prof = get_profile(self.profile)
        return [generate_synthetic(grid, s, prof, self.horizon) for s in self.seeds]


@dataclass(frozen=True)
class Flags:
    dqfd: bool = True
    gnn: bool = True
    shaping: str = "bootstrapped"
    filter: bool = True

    def __post_init__(self):
        ShapingMode(self.shaping)


@dataclass(frozen=True)
class Budgets:
    demo_episodes: int = 10
    pretrain_steps: int = 20000
    train_steps: int = 200000
    learn_interval: int = 1
    eval_interval: int = 20000


@dataclass(frozen=True)
class RunConfig:
    grid: str = "case14"
    train_chronics: ChronicSource = ChronicSource(seeds=tuple(range(100, 120)))
    demo_chronics: ChronicSource = ChronicSource(seeds=tuple(range(200, 210)))
    eval_chronics: ChronicSource = ChronicSource(seeds=tuple(range(10)))
    val_chronics: ChronicSource = ChronicSource(seeds=tuple(range(300, 310)))
    hp: Hyperparams = Hyperparams()
    flags: Flags = Flags()
    budgets: Budgets = Budgets()
    env: EnvParams = EnvParams()
    seed: int = 0
    out_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        d = dict(d or {})
        known = {"grid", "train_chronics", "demo_chronics", "eval_chronics", "val_chronics", "hp", "flags",
                 "budgets", "env", "seed", "out_dir"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        if "grid" in d:
            kw["grid"] = str(d["grid"])
        for key in ("train_chronics", "demo_chronics", "eval_chronics", "val_chronics"):
            if key in d:
                src = dict(d[key])
                if src.get("path") and base_dir is not None and not Path(src["path"]).is_absolute():
                    src["path"] = str(base_dir / src["path"])
                kw[key] = ChronicSource.from_dict(src)
        if "hp" in d:
            kw["hp"] = Hyperparams.from_dict(d["hp"])
        if "flags" in d:
            kw["flags"] = Flags(**d["flags"])
        if "budgets" in d:
            kw["budgets"] = Budgets(**d["budgets"])
        if "env" in d:
            kw["env"] = EnvParams(**d["env"])
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "out_dir" in d:
            kw["out_dir"] = str(d["out_dir"])
        cfg = cls(**kw)
        if base_dir is not None and cfg.grid != "case14" and not Path(cfg.grid).is_absolute():
            cfg = replace(cfg, grid=str(base_dir / cfg.grid))
        return cfg

    def to_dict(self) -> dict:
        def src(s: ChronicSource):
            return {"path": s.path, "profile": s.profile, "seeds": list(s.seeds), "horizon": s.horizon}
        return {
            "grid": self.grid, "train_chronics": src(self.train_chronics),
            "demo_chronics": src(self.demo_chronics), "eval_chronics": src(self.eval_chronics),
            "val_chronics": src(self.val_chronics),
            "hp": self.hp.to_dict(), "flags": vars(self.flags).copy(), "budgets": vars(self.budgets).copy(),
            "env": vars(self.env).copy(), "seed": self.seed, "out_dir": self.out_dir,
        }


def load_config(path) -> RunConfig:
    path = Path(path)
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return RunConfig.from_dict(data, base_dir=path.parent)


def with_overrides(cfg: RunConfig, hp: Optional[dict] = None, **top) -> RunConfig:
    if hp:
        cfg = replace(cfg, hp=replace(cfg.hp, **hp))
    return replace(cfg, **top) if top else cfg


def build_system(cfg: RunConfig, grid: Optional[Grid] = None) -> ControlSystem:
    grid = grid or load_grid(cfg.grid)
    return ControlSystem(grid, cfg.hp, seed=cfg.seed, use_gnn=cfg.flags.gnn,
                         filter_on=cfg.flags.filter, shaping=cfg.flags.shaping)


# ---------------------------------------------------------------------------
# checkpoints


def save_system(system: ControlSystem, path, cfg: Optional[RunConfig] = None) -> None:
    meta = {"n_line": system.grid.n_line, "n_sub": system.grid.n_sub, "use_gnn": system.use_gnn,
            "config": cfg.to_dict() if cfg else None}
    save_checkpoint(path, system.networks(), meta)


def load_system(path, cfg: Optional[RunConfig] = None, grid: Optional[Grid] = None) -> tuple[ControlSystem, RunConfig]:
    nets, meta = load_checkpoint(path)
    if cfg is None:
        cfg = RunConfig.from_dict(meta["config"]) if meta.get("config") else RunConfig()
    system = build_system(cfg, grid)
    if meta.get("n_line") != system.grid.n_line or meta.get("n_sub") != system.grid.n_sub:
        raise ValueError(f"{path}: checkpoint was made for a different grid")
    system.load_networks(nets)
    return system, cfg


# ---------------------------------------------------------------------------
# pretraining and training


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """CSV sink; floats are written with ``repr`` so identical runs give identical bytes."""

    def __init__(self, path, columns):
        self.path = Path(path) if path else None
        self.columns = columns
        self.rows = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(c, "")) for c in self.columns])


PRETRAIN_COLUMNS = ["step", "learner", "total", "td", "n_step", "supervised", "l2"]


def pretrain_dqfd(system: ControlSystem, demos, steps: int, metrics_path=None, log_every: int = 100) -> list:
    """Demo-only DQfD updates: the manager every step, plus one agent drawn by demo count."""
    if len(demos) == 0:
        raise ValueError("empty demonstration set")
    add_demos(system, demos)
    counts = np.array([ag.buffer.n_demo for ag in system.agents], dtype=float)
    for ag in system.agents:
        if ag.buffer.n_demo == 0:
            log.warning("agent %d has no demonstrations; skipped during pretraining", ag.line)
    writer = MetricsWriter(metrics_path, PRETRAIN_COLUMNS)
    probs = counts / counts.sum() if counts.sum() > 0 else None
    for k in range(steps):
        res_m = learn(system, system.manager, k, demo_only=True)
        if probs is not None:
            line = int(system.rng.choice(len(probs), p=probs))
            res_a = learn(system, system.agents[line], k, demo_only=True)
        else:
            line, res_a = -1, None
        if k % log_every == 0 or k == steps - 1:
            for name, res in (("manager", res_m), (f"agent{line}", res_a)):
                if res is not None:
                    writer.write({"step": k, "learner": name, "total": res.total, "td": res.td,
                                  "n_step": res.n_step, "supervised": res.supervised, "l2": res.l2})
    return writer.rows


TRAIN_COLUMNS = ["step", "episode", "chronic", "survive_time", "decisions", "epsilon_manager",
                 "loss_total", "loss_td", "loss_n_step", "loss_supervised", "loss_l2"]


VALIDATION_COLUMNS = ["step", "mean_survive_time", "std_survive_time", "best"]


@dataclass
class TrainResult:
    system: ControlSystem
    metrics: list
    pretrain_metrics: list = field(default_factory=list)
    demos: object = None
    validation: list = field(default_factory=list)
    best_step: Optional[int] = None


class Validator:
    """Periodic greedy evaluation on held-out chronics; keeps the best network snapshot.

    Greedy evaluation draws nothing from the system RNG, so validating does
    not perturb the training trajectory.
    """

    def __init__(self, system: ControlSystem, chronics: list, params: Optional[EnvParams], writer: MetricsWriter):
        self.system = system
        self.chronics = chronics
        self.params = params
        self.writer = writer
        self.best = -np.inf
        self.best_step: Optional[int] = None
        self._snapshot: Optional[dict] = None

    def __call__(self, step_count: int) -> float:
        rep = evaluate(self.system, self.chronics, self.params, baseline=False, timed=False)
        improved = rep.mean > self.best
        if improved:
            self.best, self.best_step = rep.mean, step_count
            self._snapshot = {k: v.copy() for k, v in self.system.networks().items()}
        self.writer.write({"step": step_count, "mean_survive_time": rep.mean, "std_survive_time": rep.std,
                           "best": int(improved)})
        return rep.mean

    def restore_best(self) -> None:
        if self._snapshot is not None:
            self.system.load_networks(self._snapshot)


def train(cfg: RunConfig, grid: Optional[Grid] = None, progress: Optional[Callable] = None,
          write_files: bool = True, demos=None) -> TrainResult:
    """Optional demo collection and pretraining, then online training for ``train_steps`` env steps."""
    grid = grid or load_grid(cfg.grid)
    out = Path(cfg.out_dir)
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
    system = build_system(cfg, grid)
    pre_rows = []
    if cfg.flags.dqfd:
        if demos is None:
            demos = collect_demonstrations(grid, cfg.demo_chronics.load(grid), cfg.budgets.demo_episodes,
                                           cfg.hp, cfg.env)
            if write_files:
                save_demos(demos, out / "demos.jsonl")
        pre_rows = pretrain_dqfd(system, demos, cfg.budgets.pretrain_steps,
                                 out / "pretrain_metrics.csv" if write_files else None)
    writer = MetricsWriter(out / "metrics.csv" if write_files else None, TRAIN_COLUMNS)
    chronics = cfg.train_chronics.load(grid)
    validator = None
    if cfg.budgets.eval_interval > 0:
        validator = Validator(system, cfg.val_chronics.load(grid), cfg.env,
                              MetricsWriter(out / "validation.csv" if write_files else None, VALIDATION_COLUMNS))
    run_training(system, chronics, cfg, writer, progress, validator)
    if validator is not None:
        if write_files:
            save_system(system, out / "last.npz", cfg)
        validator.restore_best()
    if write_files:
        save_system(system, out / "checkpoint.npz", cfg)
    return TrainResult(system, writer.rows, pre_rows, demos,
                       validator.writer.rows if validator else [], validator.best_step if validator else None)


def run_training(system: ControlSystem, chronics: list, cfg: RunConfig, writer: MetricsWriter,
                 progress: Optional[Callable] = None, validator: Optional[Validator] = None) -> None:
    """Online training for ``train_steps`` environment steps.

    With a ``validator`` the system is also validated before the first step,
    every ``eval_interval`` steps and after the last one.
    """
    hp, budget = cfg.hp, cfg.budgets.train_steps
    interval = cfg.budgets.eval_interval
    steps, episode, decisions = 0, 0, 0
    if validator is not None:
        validator(0)
    while steps < budget:
        chronic = chronics[episode % len(chronics)]
        state = reset(system.grid, chronic, cfg.env)
        trace = EpisodeTrace([state])
        losses = []
        while not state.done and steps < budget:
            dec = act(system, state, explore=True)
            out = step(state, dec.action)
            if dec.line is not None:
                trace.decisions.append((trace.end, dec.line, dec.slot))
                system.manager.decisions += 1
                system.agents[dec.line].decisions += 1
                decisions += 1
                if decisions % cfg.budgets.learn_interval == 0:
                    for learner in (system.manager, system.agents[dec.line]):
                        if len(learner.buffer) >= hp.batch_size:
                            res = learn(system, learner, decisions)
                            if res is not None:
                                losses.append(res)
            trace.push(out)
            state = out.state
            steps += 1
            if validator is not None and (steps % interval == 0 or steps == budget):
                validator(steps)
        agent_tr, manager_tr = trace_transitions(trace, hp)
        for line, tr in agent_tr:
            system.agents[line].buffer.add(tr)
        for tr in manager_tr:
            system.manager.buffer.add(tr)

        def mean(attr):
            return float(np.mean([getattr(r, attr) for r in losses])) if losses else 0.0
        row = {"step": steps, "episode": episode, "chronic": chronic.id, "survive_time": state.survive_time,
               "decisions": len(trace.decisions), "epsilon_manager": system.manager_eps(),
               "loss_total": mean("total"), "loss_td": mean("td"), "loss_n_step": mean("n_step"),
               "loss_supervised": mean("supervised"), "loss_l2": mean("l2")}
        writer.write(row)
        if progress:
            progress(row)
        episode += 1


# ---------------------------------------------------------------------------
# evaluation


EVAL_COLUMNS = ["chronic", "survive_time", "horizon", "completed", "decisions", "actions"]


@dataclass
class EvalReport:
    rows: list
    latencies: list = field(default_factory=list)
    baseline: Optional[list] = None

    @property
    def survive_times(self) -> np.ndarray:
        return np.array([r["survive_time"] for r in self.rows])

    @property
    def mean(self) -> float:
        return float(self.survive_times.mean()) if self.rows else 0.0

    @property
    def std(self) -> float:
        return float(self.survive_times.std()) if self.rows else 0.0

    def summary(self) -> dict:
        out = {"n": len(self.rows), "mean_survive_time": self.mean, "std_survive_time": self.std,
               "completed": int(sum(r["completed"] for r in self.rows))}
        if self.latencies:
            out["decision_latency_mean_s"] = float(np.mean(self.latencies))
            out["decision_latency_std_s"] = float(np.std(self.latencies))
        if self.baseline is not None:
            b = float(np.mean(self.baseline))
            out["baseline_mean_survive_time"] = b
            out["ratio_vs_baseline"] = self.mean / b if b > 0 else float("inf")
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EVAL_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in EVAL_COLUMNS])


def evaluate_policy(grid: Grid, chronics: list, policy: Callable, params: Optional[EnvParams] = None,
                    timed: bool = False) -> EvalReport:
    """Run ``policy(state) -> (Action, acted)`` once per chronic."""
    rows, lat = [], []
    for ch in chronics:
        state = reset(grid, ch, params)
        n_dec = n_act = 0
        while not state.done:
            t0 = time.perf_counter()
            action, decided = policy(state)
            if decided:
                lat.append(time.perf_counter() - t0)
                n_dec += 1
            n_act += not action.is_noop
            state = step(state, action).state
        st = state.survive_time
        rows.append({"chronic": ch.id, "survive_time": st, "horizon": ch.horizon,
                     "completed": st == ch.horizon, "decisions": n_dec, "actions": n_act})
    return EvalReport(rows, lat if timed else [])


def do_nothing_report(grid: Grid, chronics: list, params: Optional[EnvParams] = None) -> EvalReport:
    return evaluate_policy(grid, chronics, lambda s: (NOOP, False), params)


def expert_report(grid: Grid, chronics: list, params: Optional[EnvParams] = None, rho_danger: float = 0.95) -> EvalReport:
    def policy(s):
        if not is_danger(s, rho_danger):
            return NOOP, False
        return expert_action(s)[0], True
    return evaluate_policy(grid, chronics, policy, params)


def evaluate(system: ControlSystem, chronics: list, params: Optional[EnvParams] = None,
             filter_on: Optional[bool] = None, baseline: bool = True, timed: bool = True) -> EvalReport:
    """Greedy (ε = 0) evaluation of a trained system, with the Do-Nothing baseline."""
    def policy(s):
        d = act(system, s, explore=False, filter_on=filter_on)
        return d.action, d.danger
    rep = evaluate_policy(system.grid, chronics, policy, params, timed)
    if baseline:
        rep.baseline = do_nothing_report(system.grid, chronics, params).survive_times.tolist()
    return rep


# ---------------------------------------------------------------------------
# ablations


ABLATIONS = {
    "complete": {},
    "no_gnn": {"gnn": False},
    "no_dqfd": {"dqfd": False},
    "no_shaping": {"shaping": "off"},
}


def ablate(cfg: RunConfig, variants=("complete", "no_gnn", "no_dqfd", "no_shaping"),
           grid: Optional[Grid] = None, write_files: bool = True, progress=None) -> dict:
    """Train and evaluate each variant under the same seeds, chronics and budgets.

    Demonstrations are collected once and shared by every variant that uses them.
    """
    grid = grid or load_grid(cfg.grid)
    eval_chronics = cfg.eval_chronics.load(grid)
    demos = None
    if any(ABLATIONS[v].get("dqfd", cfg.flags.dqfd) for v in variants):
        demos = collect_demonstrations(grid, cfg.demo_chronics.load(grid), cfg.budgets.demo_episodes,
                                       cfg.hp, cfg.env)
    results = {}
    for name in variants:
        vcfg = replace(cfg, flags=replace(cfg.flags, **ABLATIONS[name]), out_dir=str(Path(cfg.out_dir) / name))
        res = train(vcfg, grid, progress=progress, write_files=write_files, demos=demos)
        rep = evaluate(res.system, eval_chronics, cfg.env, timed=False)
        if write_files:
            rep.write_csv(Path(vcfg.out_dir) / "eval.csv")
        results[name] = rep
    if write_files:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(cfg.out_dir) / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "mean_survive_time", "std_survive_time", "do_nothing_mean"])
            for name, rep in results.items():
                w.writerow([name, repr(rep.mean), repr(rep.std), repr(float(np.mean(rep.baseline)))])
    return results


# ---------------------------------------------------------------------------
# inference benchmark and recorded states


def record_danger_states(grid: Grid, chronics: list, n: int, params: Optional[EnvParams] = None,
                         rho_danger: float = 0.95) -> list:
    """First ``n`` danger states met while the expert drives the given chronics."""
    out = []
    for ch in chronics:
        state = reset(grid, ch, params)
        while not state.done and len(out) < n:
            a = NOOP
            if is_danger(state, rho_danger):
                out.append(state)
                a = expert_action(state)[0]
            state = step(state, a).state
        if len(out) >= n:
            break
    return out


def save_states(states: list, path) -> None:
    with open(path, "w") as fh:
        for s in states:
            fh.write(json.dumps(_snapshot(s)) + "\n")


def load_states(path, grid: Grid, params: Optional[EnvParams] = None) -> list:
    return [restore_state(grid, json.loads(ln), params) for ln in Path(path).read_text().splitlines() if ln]


@dataclass
class BenchReport:
    agent_nofilter: np.ndarray
    agent_filter: np.ndarray
    expert: np.ndarray
    candidates: np.ndarray

    def _stats(self, a):
        return float(a.mean()), float(a.std())

    @property
    def speedup(self) -> float:
        return float(self.expert.mean() / self.agent_nofilter.mean())

    def expert_slope(self) -> tuple[float, float]:
        """Least-squares ``time = a + b * candidates`` and the correlation coefficient."""
        if np.ptp(self.candidates) == 0:
            return float("nan"), float("nan")
        b, a = np.polyfit(self.candidates, self.expert, 1)
        r = float(np.corrcoef(self.candidates, self.expert)[0, 1])
        return float(b), r

    def summary(self) -> dict:
        out = {}
        for name in ("agent_nofilter", "agent_filter", "expert"):
            m, s = self._stats(getattr(self, name))
            out[f"{name}_mean_s"], out[f"{name}_std_s"] = m, s
        out["expert_over_agent_nofilter"] = self.speedup
        out["expert_over_agent_filter"] = float(self.expert.mean() / self.agent_filter.mean())
        out["expert_slope_s_per_candidate"], out["expert_time_candidate_corr"] = self.expert_slope()
        return out


def bench_inference(system: ControlSystem, states: list, repeats: int = 3) -> BenchReport:
    """Per-decision wall clock on danger states; each entry is the median over ``repeats``."""
    if len(states) == 0:
        raise ValueError("no states to benchmark")

    def timeit(fn, s):
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(s)
            ts.append(time.perf_counter() - t0)
        return float(np.median(ts))

    nf = np.array([timeit(lambda s: act(system, s, filter_on=False), s) for s in states])
    wf = np.array([timeit(lambda s: act(system, s, filter_on=True), s) for s in states])
    ex = np.array([timeit(expert_action, s) for s in states])
    cand = np.array([expert_candidate_count(s) for s in states])
    return BenchReport(nf, wf, ex, cand)


# ---------------------------------------------------------------------------
# exports


def export_graph(grid: Grid, chronic: Chronic, t: int, edges_path, features_path,
                 params: Optional[EnvParams] = None) -> None:
    state = reset(grid, chronic, params)
    while state.t < t and not state.done:
        state = step(state, NOOP).state
    write_graph_csv(build_line_graph(state), edges_path, features_path)


def heatmap_columns() -> list:
    return [f"{side}_{seg}_{k}" for side in ("or", "ex") for seg in ("bus1", "bus2", "disc") for k in range(D)]


def symmetry_score(matrix: np.ndarray) -> float:
    """Correlation of column-norm profiles of the origin and extremity halves."""
    half = matrix.shape[1] // 2
    norms = np.linalg.norm(matrix, axis=0)
    a, b = norms[:half], norms[half:]
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def gnn_heatmap(system: ControlSystem) -> np.ndarray:
    """First-layer self weights, oriented (hidden width, 6d)."""
    if not system.use_gnn:
        raise ValueError("this system was trained without a GNN")
    return system.gnn_main["Wself0"].T.copy()


def export_gnn_heatmap(system: ControlSystem, path) -> float:
    m = gnn_heatmap(system)
    write_matrix_csv(path, m, heatmap_columns(), [f"h{i}" for i in range(m.shape[0])])
    return symmetry_score(m)
