"""Two-level decision system: a manager picks a line agent, the agent picks a line action."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import env as envmod
from .env import Chronic, EnvParams, SimState, reset, simulate, step
from .graph_obs import NODE_WIDTH, line_adjacency, node_features
from .grid import (ACTIONS_PER_LINE, BUS2, DISCONNECTED, NOOP, Action, Grid, TopologyState,
                   action_index, is_legal, legal_mask, line_action)
from .nn import GNN, Adam, NetParams, mean_aggregator, soft_update
from .powerflow import Injections, dc_solve
from .rl import (DuelingQ, GraphLineQ, Hyperparams, PriorityBuffer, ShapingMode, Transition,
                 dqfd_loss, epsilon, per_beta, per_sample, static_potential)

DEMO_SCHEMA_VERSION = 1
DEFAULT_RHO_DANGER = 0.95
EXPERT_MARGIN = 0.02


# ---------------------------------------------------------------------------
# observations


def manager_obs_width(grid: Grid) -> int:
    return 2 * grid.n_line + 2 * (2 * grid.n_line + grid.n_gen + grid.n_load)


def manager_observation(state: SimState) -> np.ndarray:
    """``[limit / max limit | rho | (bus2 bit, disconnected bit) per element endpoint]``."""
    grid, topo = state.grid, state.topology
    limits = grid.thermal_limit / grid.thermal_limit.max()
    buses = np.concatenate([topo.line_or_bus, topo.line_ex_bus, topo.gen_bus, topo.load_bus])
    bits = np.stack([buses == BUS2, buses == DISCONNECTED], axis=1).astype(np.float64).ravel()
    return np.concatenate([limits, state.rho, bits])


def is_danger(state: SimState, rho_danger: float = DEFAULT_RHO_DANGER) -> bool:
    """Closed threshold: ``max rho >= rho_danger``."""
    return state.max_rho >= rho_danger


def greedy_or_random(q: np.ndarray, eps: float, rng, allowed: Optional[np.ndarray] = None) -> int:
    """ε-greedy choice; the greedy branch breaks ties toward the lowest index."""
    idx = np.arange(len(q)) if allowed is None else np.flatnonzero(allowed)
    if eps > 0.0 and rng.random() < eps:
        return int(idx[rng.integers(len(idx))])
    return int(idx[np.argmax(q[idx])])


# ---------------------------------------------------------------------------
# learners


class Learner:
    """Main/target parameter pair, optimiser, replay buffer and step counters."""

    def __init__(self, qf, main: dict, hp: Hyperparams, capacity: int):
        self.qf = qf
        self.main = main
        self.target = {k: v.copy() for k, v in main.items()}
        self.opt = Adam(main["q"], lr=hp.lr, clip=hp.clip)
        self.buffer = PriorityBuffer(capacity, hp.per_alpha, hp.eps_prio, hp.eps_demo)
        self.decisions = 0
        self.updates = 0

    def q_values(self, obs) -> np.ndarray:
        return self.qf.forward(self.main, obs[None])[0][0]


class LineAgent(Learner):
    def __init__(self, line: int, qf: GraphLineQ, main: dict, hp: Hyperparams, capacity: int):
        super().__init__(qf, main, hp, capacity)
        self.line = line

    def q_from_embedding(self, embedding: np.ndarray, local: np.ndarray) -> np.ndarray:
        x = self.qf.embed_input(embedding, local)
        return self.qf.net.forward(self.main["q"], x[None])[0][0]


class Manager(Learner):
    pass


@dataclass
class Decision:
    action: Action
    line: Optional[int] = None
    slot: int = 0
    danger: bool = False
    candidates: int = 0
    info: dict = field(default_factory=dict)


class ControlSystem:
    """Manager, one agent per line and the shared GNN, each with a target copy.

    Flags: ``use_gnn`` (False zeroes the embedding slot of every agent
    input), ``filter_on`` (one-step simulation filter in :func:`agent_act`),
    ``shaping`` (reward shaping mode used by the losses).
    """

    def __init__(self, grid: Grid, hp: Optional[Hyperparams] = None, seed: int = 0, use_gnn: bool = True,
                 filter_on: bool = True, shaping=ShapingMode.BOOTSTRAPPED, gnn_hidden: int = 64,
                 gnn_layers: int = 2, trunk=(128, 128)):
        self.grid = grid
        self.hp = hp or Hyperparams()
        self.use_gnn = use_gnn
        self.filter_on = filter_on
        self.shaping = ShapingMode(shaping)
        self.rng = np.random.default_rng(seed)
        init_rng = np.random.default_rng([seed, 1])
        self.agg = mean_aggregator(line_adjacency(grid))
        self.gnn = GNN(NODE_WIDTH, gnn_hidden, gnn_layers)
        self.gnn_main = self.gnn.init(init_rng)
        self.gnn_target = self.gnn_main.copy()
        self.gnn_opt = Adam(self.gnn_main, lr=self.hp.lr, clip=self.hp.clip)
        self.gnn_queue: list = []
        mq = DuelingQ(manager_obs_width(grid), grid.n_line, trunk)
        self.manager = Manager(mq, mq.init(init_rng), self.hp, self.hp.buffer_capacity)
        self.agents = []
        for i in range(grid.n_line):
            qf = GraphLineQ(i, self.agg, self.gnn, NODE_WIDTH, ACTIONS_PER_LINE, trunk, use_gnn)
            ag = LineAgent(i, qf, {"q": qf.init(init_rng)}, self.hp, self.hp.buffer_capacity)
            self._bind_gnn(ag)
            self.agents.append(ag)
        self.stats = {"gnn_forward": 0, "manager_calls": 0, "agent_calls": 0}

    def _bind_gnn(self, ag: LineAgent) -> None:
        ag.main["gnn"] = self.gnn_main
        ag.target["gnn"] = self.gnn_target

    # -- inventory ---------------------------------------------------------
    def networks(self) -> dict:
        """Every parameter set by name: L agent pairs, the manager pair and the GNN pair."""
        nets = {"gnn/main": self.gnn_main, "gnn/target": self.gnn_target,
                "manager/main": self.manager.main["q"], "manager/target": self.manager.target["q"]}
        for ag in self.agents:
            nets[f"agent{ag.line}/main"] = ag.main["q"]
            nets[f"agent{ag.line}/target"] = ag.target["q"]
        return nets

    def load_networks(self, nets: dict) -> None:
        def put(dst: NetParams, src: NetParams):
            if dst.shapes() != src.shapes():
                raise ValueError("checkpoint does not match this grid / architecture")
            for k in dst:
                dst[k][...] = src[k]
        missing = set(self.networks()) - set(nets)
        if missing:
            raise ValueError(f"checkpoint lacks networks: {sorted(missing)[:3]}")
        for name, p in self.networks().items():
            put(p, nets[name])

    # -- inference ---------------------------------------------------------
    def embed(self, features: np.ndarray) -> np.ndarray:
        self.stats["gnn_forward"] += 1
        return self.gnn.forward(self.gnn_main, features, self.agg)[0]

    def manager_eps(self) -> float:
        hp = self.hp
        return epsilon(self.manager.decisions, hp.eps0, hp.eps_half_life, hp.eps_min)

    def agent_eps(self, ag: LineAgent) -> float:
        hp = self.hp
        return epsilon(ag.decisions, hp.eps0, hp.eps_half_life, hp.eps_min)


def select_agent(manager: Learner, obs: np.ndarray, eps: float, rng) -> int:
    return greedy_or_random(manager.q_values(obs), eps, rng)


def filter_candidates(state: SimState, line: int, mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop non-NOOP slots whose one-step simulation blacks out or raises max rho above NOOP's."""
    keep = mask.copy()
    keep[0] = True
    base = simulate(state, NOOP).state.max_rho
    connected = bool(state.topology.line_status[line])
    n_sim = 1
    for k in np.flatnonzero(mask[1:]) + 1:
        out = simulate(state, line_action(line, int(k), connected))
        n_sim += 1
        if out.state.blackout or out.state.max_rho > base:
            keep[k] = False
    return keep, n_sim


def agent_act(agent: LineAgent, embedding: np.ndarray, state: SimState, eps: float, rng,
              filter_on: bool, features: Optional[np.ndarray] = None) -> tuple[Action, int]:
    """Pick a legal action for ``agent``'s line; returns ``(action, slot index)``."""
    line = agent.line
    mask = legal_mask(state.grid, state.topology, line)
    allowed = mask
    if filter_on:
        allowed, _ = filter_candidates(state, line, mask)
    local = (features if features is not None else node_features(state))[line]
    q = agent.q_from_embedding(embedding, local)
    slot = greedy_or_random(q, eps, rng, allowed)
    return line_action(line, slot, bool(state.topology.line_status[line])), slot


def act(system: ControlSystem, state: SimState, explore: bool = False,
        filter_on: Optional[bool] = None) -> Decision:
    """Danger gate, manager choice, one GNN pass, then the chosen agent's action."""
    if state.done:
        raise envmod.EnvError("act called on a finished episode")
    if not is_danger(state, system.hp.rho_danger):
        return Decision(NOOP)
    mgr = system.manager
    m_obs = manager_observation(state)
    system.stats["manager_calls"] += 1
    line = select_agent(mgr, m_obs, system.manager_eps() if explore else 0.0, system.rng)
    feats = node_features(state)
    emb = system.embed(feats)[line] if system.use_gnn else np.zeros(system.gnn.out_width)
    agent = system.agents[line]
    system.stats["agent_calls"] += 1
    filt = system.filter_on if filter_on is None else filter_on
    action, slot = agent_act(agent, emb, state, system.agent_eps(agent) if explore else 0.0,
                             system.rng, filt, feats)
    return Decision(action, line, slot, True, info={"manager_obs": m_obs, "features": feats})


# ---------------------------------------------------------------------------
# expert


def expert_action(state: SimState, margin: float = EXPERT_MARGIN) -> tuple[Action, Optional[int]]:
    """Greedy one-step search over every legal non-NOOP line action.

    Scores are simulated max rho (blackout = inf).  The best candidate, with
    ties broken by line then slot, is returned only if it beats NOOP by
    ``margin``.
    """
    a, line, _ = _expert_search(state, margin)
    return a, line


def _expert_search(state: SimState, margin: float):
    grid, topo = state.grid, state.topology
    noop = simulate(state, NOOP).state
    noop_score = math.inf if noop.blackout else noop.max_rho
    best = (math.inf, grid.n_line, ACTIONS_PER_LINE)
    best_action = None
    n = 1
    for line in range(grid.n_line):
        mask = legal_mask(grid, topo, line)
        connected = bool(topo.line_status[line])
        for k in np.flatnonzero(mask[1:]) + 1:
            a = line_action(line, int(k), connected)
            out = simulate(state, a).state
            n += 1
            score = math.inf if out.blackout else out.max_rho
            key = (score, line, int(k))
            if key < best:
                best, best_action = key, a
    if best_action is not None and best[0] < noop_score - margin:
        return best_action, best[1], n
    return NOOP, None, n


def expert_candidate_count(state: SimState) -> int:
    return int(sum(legal_mask(state.grid, state.topology, i)[1:].sum() for i in range(state.grid.n_line)))


def expert_policy(rho_danger: float = DEFAULT_RHO_DANGER, margin: float = EXPERT_MARGIN):
    """Policy closure: expert in danger states, NOOP otherwise."""
    def policy(state):
        if not is_danger(state, rho_danger):
            return NOOP
        return expert_action(state, margin)[0]
    return policy


# ---------------------------------------------------------------------------
# episode bookkeeping shared by self-play and demonstrations


@dataclass
class EpisodeTrace:
    """States ``s_0..s_E``, step rewards ``r_1..r_E`` and the decisions taken."""

    states: list
    rewards: list = field(default_factory=lambda: [0.0])
    decisions: list = field(default_factory=list)  # (t index, line, slot)

    def push(self, outcome) -> None:
        self.states.append(outcome.state)
        self.rewards.append(float(outcome.reward))

    @property
    def end(self) -> int:
        return len(self.states) - 1


def _discounted(rewards, start, stop, gamma):
    total, g = 0.0, 1.0
    for j in range(start, stop):
        total += g * rewards[j]
        g *= gamma
    return total, g


class _FeatureCache:
    def __init__(self, trace):
        self.trace = trace
        self.nf = {}
        self.mo = {}

    def features(self, k):
        if k not in self.nf:
            self.nf[k] = node_features(self.trace.states[k])
        return self.nf[k]

    def manager(self, k):
        if k not in self.mo:
            self.mo[k] = manager_observation(self.trace.states[k])
        return self.mo[k]


def _phi(state: SimState) -> float:
    return static_potential(state.max_rho, state.blackout)


def trace_transitions(trace: EpisodeTrace, hp: Hyperparams, is_demo: bool = False):
    """Build agent and manager transitions from a finished (or truncated) episode.

    Agent transitions are one-step with an n-step companion over the step
    reward stream.  Manager transitions span the interval until the next
    decision (or episode end) with discount ``gamma**k``; their n-step
    companion spans the next ``n`` manager decisions.  Time-limit ends are
    bootstrapped; only blackouts are terminal.
    """
    g, n, E = hp.gamma, hp.n_step, trace.end
    cache = _FeatureCache(trace)
    states, rewards = trace.states, trace.rewards
    agent_tr, manager_tr = [], []

    def mask(k, line):
        return legal_mask(states[k].grid, states[k].topology, line)

    for t, line, slot in trace.decisions:
        m = min(n, E - t)
        rn, gn = _discounted(rewards, t + 1, t + 1 + m, g)
        s1, sm = states[t + 1], states[t + m]
        agent_tr.append((line, Transition(
            obs=cache.features(t), action=slot, reward=rewards[t + 1], discount=g,
            next_obs=cache.features(t + 1), done=s1.blackout,
            n_reward=rn, n_discount=gn, n_next_obs=cache.features(t + m), n_done=sm.blackout,
            is_demo=is_demo, next_mask=mask(t + 1, line), n_next_mask=mask(t + m, line),
            phi=_phi(states[t]), phi_next=_phi(s1), phi_n_next=_phi(sm))))

    times = [d[0] for d in trace.decisions] + [E]
    for j, (t, line, _) in enumerate(trace.decisions):
        t1 = times[j + 1]
        r1, g1 = _discounted(rewards, t + 1, t1 + 1, g)
        tn = times[min(j + n, len(times) - 1)]
        rn, gn = _discounted(rewards, t + 1, tn + 1, g)
        manager_tr.append(Transition(
            obs=cache.manager(t), action=line, reward=r1, discount=g1,
            next_obs=cache.manager(t1), done=states[t1].blackout,
            n_reward=rn, n_discount=gn, n_next_obs=cache.manager(tn), n_done=states[tn].blackout,
            is_demo=is_demo, phi=_phi(states[t]), phi_next=_phi(states[t1]), phi_n_next=_phi(states[tn])))
    return agent_tr, manager_tr


# ---------------------------------------------------------------------------
# demonstrations


@dataclass(frozen=True, eq=False)
class DemoRecord:
    level: str  # "manager" or "agent"
    line: int
    slot: int
    transition: Transition
    state: SimState
    chronic_id: str

    @property
    def action(self) -> int:
        return self.line if self.level == "manager" else self.slot


@dataclass
class DemoSet:
    records: list
    episodes: int
    survive_times: list

    def agent_records(self, line: Optional[int] = None) -> list:
        return [r for r in self.records if r.level == "agent" and (line is None or r.line == line)]

    def manager_records(self) -> list:
        return [r for r in self.records if r.level == "manager"]

    def __len__(self):
        return len(self.records)


def collect_demonstrations(grid: Grid, chronics: list, budget: int, hp: Optional[Hyperparams] = None,
                           params: Optional[EnvParams] = None, margin: float = EXPERT_MARGIN) -> DemoSet:
    """Run the expert on the first ``budget`` chronics and record its danger-step decisions."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    hp = hp or Hyperparams()
    records, survive = [], []
    for chronic in chronics[:budget]:
        state = reset(grid, chronic, params)
        trace = EpisodeTrace([state])
        while not state.done:
            action, line = NOOP, None
            if is_danger(state, hp.rho_danger):
                action, line = expert_action(state, margin)
            if line is not None:
                trace.decisions.append((trace.end, line, action_index(action)))
            out = step(state, action)
            trace.push(out)
            state = out.state
        survive.append(state.survive_time)
        agent_tr, manager_tr = trace_transitions(trace, hp, is_demo=True)
        for (t, line, slot), (_, atr), mtr in zip(trace.decisions, agent_tr, manager_tr):
            s = trace.states[t]
            records.append(DemoRecord("manager", line, slot, mtr, s, chronic.id))
            records.append(DemoRecord("agent", line, slot, atr, s, chronic.id))
    return DemoSet(records, min(budget, len(chronics)), survive)


def _snapshot(state: SimState) -> dict:
    topo = state.topology
    return {
        "t": int(state.t),
        "line_or_bus": topo.line_or_bus.tolist(), "line_ex_bus": topo.line_ex_bus.tolist(),
        "gen_bus": topo.gen_bus.tolist(), "load_bus": topo.load_bus.tolist(),
        "sub_cooldown": topo.sub_cooldown.tolist(), "line_cooldown": topo.line_cooldown.tolist(),
        "overflow_count": topo.overflow_count.tolist(), "cooldown": int(topo.cooldown),
        "gen_p": state.injections.gen_p.tolist(), "load_p": state.injections.load_p.tolist(),
    }


def restore_state(grid: Grid, snap: dict, params: Optional[EnvParams] = None) -> SimState:
    """Rebuild a stand-alone state from a snapshot (a one-row chronic holding its injections)."""
    params = params or EnvParams()
    topo = TopologyState(
        line_or_bus=np.array(snap["line_or_bus"], np.int8), line_ex_bus=np.array(snap["line_ex_bus"], np.int8),
        gen_bus=np.array(snap["gen_bus"], np.int8), load_bus=np.array(snap["load_bus"], np.int8),
        sub_cooldown=np.array(snap["sub_cooldown"], np.int32),
        line_cooldown=np.array(snap["line_cooldown"], np.int32),
        overflow_count=np.array(snap["overflow_count"], np.int32), cooldown=snap["cooldown"])
    gp, lp = np.array(snap["gen_p"], float), np.array(snap["load_p"], float)
    chronic = Chronic(f"snapshot-t{snap['t']}", gp[None], lp[None])
    inj = Injections(gp, lp, 0)
    sol = dc_solve(grid, topo, inj, params.slack_tolerance)
    return SimState(grid, chronic, params, topo, sol, inj, 0, False, not sol.solvable)


def _tr_to_dict(tr: Transition) -> dict:
    def arr(x):
        return None if x is None else np.asarray(x).tolist()
    return {"obs": arr(tr.obs), "action": tr.action, "reward": tr.reward, "discount": tr.discount,
            "next_obs": arr(tr.next_obs), "done": bool(tr.done), "n_reward": tr.n_reward,
            "n_discount": tr.n_discount, "n_next_obs": arr(tr.n_next_obs), "n_done": bool(tr.n_done),
            "next_mask": arr(tr.next_mask), "n_next_mask": arr(tr.n_next_mask),
            "phi": tr.phi, "phi_next": tr.phi_next, "phi_n_next": tr.phi_n_next}


def _tr_from_dict(d: dict) -> Transition:
    def arr(x, dt=float):
        return None if x is None else np.array(x, dtype=dt)
    return Transition(arr(d["obs"]), d["action"], d["reward"], d["discount"], arr(d["next_obs"]), d["done"],
                      d["n_reward"], d["n_discount"], arr(d["n_next_obs"]), d["n_done"], True,
                      arr(d["next_mask"], bool), arr(d["n_next_mask"], bool),
                      d["phi"], d["phi_next"], d["phi_n_next"])


def save_demos(demos: DemoSet, path) -> None:
    """JSON lines: a header line, then one record per line."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema_version": DEMO_SCHEMA_VERSION, "episodes": demos.episodes,
                             "survive_times": demos.survive_times}) + "\n")
        for r in demos.records:
            fh.write(json.dumps({
                "level": r.level, "line": r.line, "slot": r.slot, "chronic": r.chronic_id,
                "action": r.action, "n_return": r.transition.n_reward,
                "state": _snapshot(r.state), "transition": _tr_to_dict(r.transition),
            }) + "\n")


def load_demos(path, grid: Grid, params: Optional[EnvParams] = None) -> DemoSet:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty demo file")
    head = json.loads(lines[0])
    if head.get("schema_version") != DEMO_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported demo schema {head.get('schema_version')}")
    records = []
    for ln in lines[1:]:
        d = json.loads(ln)
        records.append(DemoRecord(d["level"], d["line"], d["slot"], _tr_from_dict(d["transition"]),
                                  restore_state(grid, d["state"], params), d["chronic"]))
    return DemoSet(records, head["episodes"], head["survive_times"])


def demo_is_legal(record: DemoRecord) -> bool:
    s = record.state
    a = line_action(record.line, record.slot, bool(s.topology.line_status[record.line]))
    return record.slot != 0 and is_legal(s.grid, s.topology, a)


# ---------------------------------------------------------------------------
# learning steps


def learn(system: ControlSystem, learner: Learner, step_count: int, demo_only: bool = False):
    """One prioritized DQfD update of ``learner``; GNN gradients go through the system queue."""
    hp = system.hp
    buf = learner.buffer
    if len(buf) == 0 or (demo_only and buf.n_demo == 0):
        return None
    batch, w, idx = per_sample(buf, hp.batch_size, system.rng, per_beta(step_count, hp))
    res = dqfd_loss(batch, learner.qf, learner.main, learner.target, hp, w, system.shaping)
    learner.opt.step(learner.main["q"], res.grads["q"])
    if "gnn" in res.grads:
        system.gnn_queue.append(res.grads["gnn"])
        flush_gnn_queue(system)
    buf.update_priorities(idx, res.td_errors)
    learner.updates += 1
    if learner.updates % hp.sync_interval == 0:
        sync_targets(system, learner)
    return res


def flush_gnn_queue(system: ControlSystem) -> None:
    """Apply queued GNN gradients in arrival order (the only writer of the GNN)."""
    while system.gnn_queue:
        system.gnn_opt.step(system.gnn_main, system.gnn_queue.pop(0))


def sync_targets(system: ControlSystem, learner: Learner) -> None:
    tau = system.hp.tau
    new_q = soft_update(learner.main["q"], learner.target["q"], tau)
    for k in new_q:
        learner.target["q"][k][...] = new_q[k]
    if isinstance(learner, LineAgent) and system.use_gnn:
        new_g = soft_update(system.gnn_main, system.gnn_target, tau)
        for k in new_g:
            system.gnn_target[k][...] = new_g[k]


def add_demos(system: ControlSystem, demos: DemoSet) -> None:
    for r in demos.records:
        if r.level == "manager":
            system.manager.buffer.add(r.transition)
        else:
            system.agents[r.line].buffer.add(r.transition)


def greedy_decision(system: ControlSystem, state: SimState) -> tuple[int, int]:
    """Unfiltered greedy (line, slot) the system would choose in ``state``."""
    line = int(np.argmax(system.manager.q_values(manager_observation(state))))
    feats = node_features(state)
    emb = system.embed(feats)[line] if system.use_gnn else np.zeros(system.gnn.out_width)
    mask = legal_mask(state.grid, state.topology, line)
    q = system.agents[line].q_from_embedding(emb, feats[line])
    return line, int(np.flatnonzero(mask)[np.argmax(q[mask])])
