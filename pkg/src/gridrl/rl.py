"""Replay, targets and losses for the value-based learners."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional

import numpy as np

from . import kernels
from .nn import DuelingNet, GNN, NetParams, check_finite_loss


class ShapingMode(str, enum.Enum):
    OFF = "off"
    STATIC = "static"
    BOOTSTRAPPED = "bootstrapped"


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.99
    lr: float = 5e-4
    eps0: float = 0.5
    eps_half_life: float = 2000.0
    eps_min: float = 0.01
    tau: float = 0.01
    sync_interval: int = 50
    clip: float = 3.0
    per_alpha: float = 0.6
    per_beta0: float = 0.4
    per_beta_steps: int = 20000
    eps_prio: float = 1e-3
    eps_demo: float = 1.0
    margin: float = 0.8
    lambda_n: float = 1.0
    lambda_e: float = 1.0
    lambda_l2: float = 1e-5
    n_step: int = 5
    batch_size: int = 32
    buffer_capacity: int = 4096
    blackout_penalty: float = 10.0
    rho_danger: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.eps_half_life <= 0:
            raise ValueError("eps_half_life must be positive")
        for name in ("lambda_n", "lambda_e", "lambda_l2", "margin", "eps_prio", "eps_demo", "per_alpha", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_step < 1 or self.batch_size < 1 or self.sync_interval < 1:
            raise ValueError("n_step, batch_size and sync_interval must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        base = cls()
        cast = {k: type(getattr(base, k))(v) for k, v in d.items()}
        return replace(base, **cast)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def epsilon(t: float, eps0: float, half_life: float, eps_min: float = 0.0) -> float:
    """Exploration rate halving every ``half_life`` steps, floored at ``eps_min``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return max(eps_min, eps0 * 2.0 ** (-t / half_life))


def per_beta(step: int, hp: Hyperparams) -> float:
    if hp.per_beta_steps <= 0:
        return 1.0
    return min(1.0, hp.per_beta0 + (1.0 - hp.per_beta0) * step / hp.per_beta_steps)


# ---------------------------------------------------------------------------
# transitions and replay


@dataclass(frozen=True, eq=False)
class Transition:
    """One learner decision.

    ``discount`` is the factor applied to the bootstrap value (``gamma`` for
    one-step agent transitions, ``gamma**k`` for a manager decision spanning
    ``k`` environment steps).  ``phi``/``phi_next``/``phi_n_next`` are static
    potentials (zero at terminal states); they are ignored by other modes.
    """

    obs: Any
    action: int
    reward: float
    discount: float
    next_obs: Any
    done: bool
    n_reward: float
    n_discount: float
    n_next_obs: Any
    n_done: bool
    is_demo: bool = False
    next_mask: Optional[np.ndarray] = None
    n_next_mask: Optional[np.ndarray] = None
    phi: float = 0.0
    phi_next: float = 0.0
    phi_n_next: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.reward) and np.isfinite(self.n_reward)):
            raise ValueError("transition rewards must be finite")


class EmptyBufferError(RuntimeError):
    pass


class PriorityBuffer:
    """Proportional prioritized replay on a sum tree.

    Demonstrations occupy the leading slots and are never evicted; the rest
    of the capacity is a ring for self-generated transitions.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, eps_prio: float = 1e-3, eps_demo: float = 1.0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.alpha = alpha
        self.eps_prio = eps_prio
        self.eps_demo = eps_demo
        self._cap2 = 1
        while self._cap2 < capacity:
            self._cap2 *= 2
        self._tree = np.zeros(2 * self._cap2)
        self._data: list = [None] * capacity
        self._prio = np.zeros(capacity)
        self.n_demo = 0
        self._size = 0
        self._next = 0
        self._max_prio = 1.0

    def __len__(self):
        return self._size

    @property
    def total(self) -> float:
        return float(self._tree[1])

    def priority(self, idx: int) -> float:
        return float(self._prio[idx])

    def _set(self, idx: int, prio: float) -> None:
        self._prio[idx] = prio
        kernels.sumtree_set(self._tree, self._cap2, idx, prio ** self.alpha)

    def add(self, tr: Transition, priority: Optional[float] = None) -> int:
        """Insert ``tr`` with ``priority`` (default: the largest seen) and return its slot."""
        if tr.is_demo:
            if self._size > self.n_demo:
                raise RuntimeError("demonstrations must be added before self-play transitions")
            if self.n_demo >= self.capacity:
                raise RuntimeError("buffer full of demonstrations")
            idx = self.n_demo
            self.n_demo += 1
            self._size += 1
            self._next = self.n_demo
        else:
            if self.n_demo >= self.capacity:
                raise RuntimeError("no room for self-play transitions")
            idx = self._next
            self._next += 1
            if self._next >= self.capacity:
                self._next = self.n_demo
            self._size = min(self.capacity, self._size + (1 if self._data[idx] is None else 0))
        p = self._max_prio if priority is None else priority
        if p <= 0:
            raise ValueError("priorities must be positive")
        self._data[idx] = tr
        self._set(idx, p)
        return idx

    def update_priorities(self, idx, td_errors) -> None:
        for i, d in zip(np.asarray(idx).tolist(), np.asarray(td_errors, dtype=np.float64).tolist()):
            p = abs(d) + self.eps_prio + (self.eps_demo if self._data[i].is_demo else 0.0)
            self._max_prio = max(self._max_prio, p)
            self._set(i, p)

    def probabilities(self) -> np.ndarray:
        pa = self._prio[:self._size] ** self.alpha
        return pa / pa.sum()

    def demos(self) -> list:
        return self._data[:self.n_demo]

    def items(self) -> list:
        return [d for d in self._data if d is not None]


def per_sample(buffer: PriorityBuffer, batch_size: int, rng, beta: float = 0.4):
    """Draw ``batch_size`` indices with probability ``p^alpha / sum p^alpha``.

    Returns ``(transitions, weights, indices)``; weights are
    ``(N P(i))^-beta`` normalised by their batch maximum.
    """
    if len(buffer) == 0:
        raise EmptyBufferError("cannot sample from an empty buffer")
    total = buffer.total
    u = rng.random(batch_size) * total
    idx = kernels.sumtree_find(buffer._tree, buffer._cap2, u)
    idx = np.minimum(idx, len(buffer) - 1)
    probs = (buffer._prio[idx] ** buffer.alpha) / total
    w = (len(buffer) * probs) ** (-beta)
    w = w / w.max()
    return [buffer._data[i] for i in idx.tolist()], w, idx


# ---------------------------------------------------------------------------
# Q functions


class QFunction:
    """Maps an observation batch to action values.

    ``params`` is a dict of named :class:`NetParams`; ``backward`` returns
    gradients keyed the same way.
    """

    n_actions: int

    def stack(self, observations: list):
        return np.stack(observations)

    def forward(self, params: dict, obs):
        raise NotImplementedError

    def backward(self, params: dict, cache, dq) -> dict:
        raise NotImplementedError

    def value(self, params: dict, obs) -> np.ndarray:
        raise NotImplementedError


class DuelingQ(QFunction):
    """Plain dueling network over a flat observation vector."""

    def __init__(self, n_in: int, n_actions: int, hidden=(128, 128)):
        self.net = DuelingNet(n_in, n_actions, hidden)
        self.n_actions = n_actions

    def init(self, rng) -> dict:
        return {"q": self.net.init(rng)}

    def forward(self, params, obs):
        return self.net.forward(params["q"], obs)

    def backward(self, params, cache, dq):
        g, _ = self.net.backward(params["q"], cache, dq)
        return {"q": g}

    def value(self, params, obs):
        return self.net.value_of(params["q"], obs)


class GraphLineQ(QFunction):
    """Dueling head over ``[GNN(X)[line] | X[line]]`` for one line agent.

    Observations are full line-graph feature matrices ``(L, F)``; the shared
    GNN runs over the whole graph and the agent reads its own row.  With
    ``use_gnn=False`` the embedding slot is all zeros (same network width).
    """

    def __init__(self, line: int, aggregator: np.ndarray, gnn: GNN, n_feat: int,
                 n_actions: int = 5, hidden=(128, 128), use_gnn: bool = True):
        self.line = line
        self.agg = aggregator
        self.gnn = gnn
        self.n_feat = n_feat
        self.use_gnn = use_gnn
        self.n_actions = n_actions
        self.net = DuelingNet(gnn.out_width + n_feat, n_actions, hidden)

    def init(self, rng) -> NetParams:
        return self.net.init(rng)

    def _inputs(self, params, obs):
        local = obs[..., self.line, :]
        if self.use_gnn:
            emb, gcache = self.gnn.forward(params["gnn"], obs, self.agg)
            e = emb[..., self.line, :]
        else:
            gcache = None
            e = np.zeros(local.shape[:-1] + (self.gnn.out_width,))
        return np.concatenate([e, local], axis=-1), gcache

    def embed_input(self, embedding: np.ndarray, obs_row: np.ndarray) -> np.ndarray:
        e = embedding if self.use_gnn else np.zeros_like(embedding)
        return np.concatenate([e, obs_row])

    def forward(self, params, obs):
        x, gcache = self._inputs(params, obs)
        q, qcache = self.net.forward(params["q"], x)
        return q, (qcache, gcache, obs.shape)

    def backward(self, params, cache, dq):
        qcache, gcache, shape = cache
        gq, dx = self.net.backward(params["q"], qcache, dq)
        out = {"q": gq}
        if self.use_gnn:
            demb = np.zeros(shape[:-1] + (self.gnn.out_width,))
            demb[..., self.line, :] = dx[..., :self.gnn.out_width]
            gg, _ = self.gnn.backward(params["gnn"], gcache, demb)
            out["gnn"] = gg
        return out

    def value(self, params, obs):
        x, _ = self._inputs(params, obs)
        return self.net.value_of(params["q"], x)


def masked_argmax(q: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    """Row-wise argmax (lowest index on ties), restricted to ``mask`` when given."""
    if mask is None:
        return np.argmax(q, axis=-1)
    return np.argmax(np.where(mask, q, -np.inf), axis=-1)


def _stack_masks(masks, n, n_actions):
    if all(m is None for m in masks):
        return None
    return np.stack([np.ones(n_actions, bool) if m is None else m for m in masks])


def double_dqn_target(rewards, discounts, dones, q_main_next, q_target_next, mask=None) -> np.ndarray:
    """``r + discount * Q_target(s', argmax_a Q_main(s', a))``; ``r`` alone when done."""
    a_star = masked_argmax(q_main_next, mask)
    boot = q_target_next[np.arange(len(a_star)), a_star]
    return np.asarray(rewards, float) + np.where(dones, 0.0, np.asarray(discounts, float) * boot)


def shape_reward(r: float, phi_s: float, phi_next: float, done: bool, discount: float,
                 mode: ShapingMode) -> float:
    """Potential-based shaping ``r + discount * phi(s') - phi(s)`` with ``phi(terminal) = 0``."""
    if ShapingMode(mode) is ShapingMode.OFF:
        return r
    return r + (0.0 if done else discount * phi_next) - phi_s


def static_potential(max_rho: float, terminal: bool = False) -> float:
    return 0.0 if terminal else -float(max_rho)


@dataclass
class LossResult:
    total: float
    td: float
    n_step: float
    supervised: float
    l2: float
    grads: dict
    td_errors: np.ndarray = field(repr=False)


def large_margin(q: np.ndarray, a_e: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``max_a [Q(a) + m 1(a != a_E)] - Q(a_E)`` and the maximising action."""
    rows = np.arange(len(a_e))
    aug = q + margin
    aug[rows, a_e] = q[rows, a_e]
    a_max = np.argmax(aug, axis=1)
    return aug[rows, a_max] - q[rows, a_e], a_max


def dqfd_loss(batch: list, qf: QFunction, main: dict, target: dict, hp: Hyperparams,
              weights=None, shaping: ShapingMode = ShapingMode.OFF, l2_keys=("q",)) -> LossResult:
    """Combined DQfD objective and its gradients w.r.t. ``main``.

    ``J_TD`` and ``J_n`` are importance-weighted mean squared errors against
    double-DQN targets; ``J_E`` is the large-margin loss on demonstration
    rows; the L2 term covers the parameter sets named in ``l2_keys``.
    """
    B = len(batch)
    w = np.ones(B) if weights is None else np.asarray(weights, float)
    obs = qf.stack([t.obs for t in batch])
    nxt = qf.stack([t.next_obs for t in batch])
    nn_ = qf.stack([t.n_next_obs for t in batch])
    acts = np.array([t.action for t in batch], dtype=np.intp)
    done = np.array([t.done for t in batch])
    n_done = np.array([t.n_done for t in batch])
    disc = np.array([t.discount for t in batch])
    n_disc = np.array([t.n_discount for t in batch])
    r = np.array([t.reward for t in batch], float)
    rn = np.array([t.n_reward for t in batch], float)
    demo = np.array([t.is_demo for t in batch])

    mode = ShapingMode(shaping)
    if mode is ShapingMode.STATIC:
        phi = np.array([t.phi for t in batch])
        r = r + np.where(done, 0.0, disc * np.array([t.phi_next for t in batch])) - phi
        rn = rn + np.where(n_done, 0.0, n_disc * np.array([t.phi_n_next for t in batch])) - phi
    elif mode is ShapingMode.BOOTSTRAPPED:
        v_s = qf.value(target, obs)
        r = r + np.where(done, 0.0, disc * qf.value(target, nxt)) - v_s
        rn = rn + np.where(n_done, 0.0, n_disc * qf.value(target, nn_)) - v_s

    q, cache = qf.forward(main, obs)
    both = qf.stack([*[t.next_obs for t in batch], *[t.n_next_obs for t in batch]]) if B else nxt
    qm_both, _ = qf.forward(main, both)
    qt_both, _ = qf.forward(target, both)
    mask1 = _stack_masks([t.next_mask for t in batch], B, qf.n_actions)
    maskn = _stack_masks([t.n_next_mask for t in batch], B, qf.n_actions)
    y1 = double_dqn_target(r, disc, done, qm_both[:B], qt_both[:B], mask1)
    yn = double_dqn_target(rn, n_disc, n_done, qm_both[B:], qt_both[B:], maskn)

    rows = np.arange(B)
    q_sa = q[rows, acts]
    d1 = y1 - q_sa
    dn = yn - q_sa
    j_td = float(np.sum(w * d1 * d1) / B)
    j_n = float(np.sum(w * dn * dn) / B)
    je_rows, a_max = large_margin(q, acts, hp.margin)
    je_rows = np.where(demo, je_rows, 0.0)
    j_e = float(np.sum(w * je_rows) / B)
    l2 = float(sum(main[k].sq_norm() for k in l2_keys if k in main))
    total = j_td + hp.lambda_n * j_n + hp.lambda_e * j_e + hp.lambda_l2 * l2
    check_finite_loss(total)

    dq = np.zeros_like(q)
    dq[rows, acts] += (-2.0 * w * d1 - hp.lambda_n * 2.0 * w * dn) / B
    ge = hp.lambda_e * w * demo / B
    np.add.at(dq, (rows, a_max), ge)
    np.add.at(dq, (rows, acts), -ge)
    grads = qf.backward(main, cache, dq)
    for k in l2_keys:
        if k in grads:
            for name in grads[k]:
                grads[k][name] = grads[k][name] + 2.0 * hp.lambda_l2 * main[k][name]
    return LossResult(total, j_td, j_n, j_e, l2, grads, d1)
