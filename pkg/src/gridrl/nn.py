"""A small dense neural stack with explicit backward passes.

Networks are stateless descriptions (shapes and activations); their weights
live in :class:`NetParams`, a dict of named arrays.  ``forward`` returns an
output plus a cache, ``backward`` consumes the cache and an output gradient
and returns parameter gradients and the input gradient.
"""
from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Callable, Optional

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


class NetParams(dict):
    """Ordered name -> array mapping tagged with the network kind."""

    def __init__(self, kind: str, arrays=()):
        super().__init__(arrays)
        self.kind = kind

    def copy(self) -> "NetParams":
        return NetParams(self.kind, {k: v.copy() for k, v in self.items()})

    def shapes(self) -> dict:
        return {k: tuple(v.shape) for k, v in self.items()}

    def zeros_like(self) -> "NetParams":
        return NetParams(self.kind, {k: np.zeros_like(v) for k, v in self.items()})

    def sq_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self.values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


def _init_linear(rng, n_in, n_out, dtype):
    bound = 1.0 / np.sqrt(n_in)
    W = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
    b = rng.uniform(-bound, bound, size=n_out).astype(dtype)
    return W, b


def relu(x):
    return np.maximum(x, 0.0)


class MLP:
    """Fully connected stack; hidden layers use ReLU, the last is linear unless ``relu_out``."""

    kind = "mlp"

    def __init__(self, sizes, relu_out: bool = False, prefix: str = ""):
        self.sizes = list(sizes)
        self.relu_out = relu_out
        self.prefix = prefix

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def init(self, rng, dtype=np.float64) -> NetParams:
        p = NetParams(self.kind)
        self.init_into(p, rng, dtype)
        return p

    def init_into(self, p: dict, rng, dtype=np.float64) -> None:
        for k in range(self.n_layers):
            p[f"{self.prefix}W{k}"], p[f"{self.prefix}b{k}"] = _init_linear(rng, self.sizes[k], self.sizes[k + 1], dtype)

    def forward(self, p, x):
        acts = [x]
        h = x
        for k in range(self.n_layers):
            z = h @ p[f"{self.prefix}W{k}"] + p[f"{self.prefix}b{k}"]
            h = relu(z) if (k < self.n_layers - 1 or self.relu_out) else z
            acts.append(h)
        return h, acts

    def backward(self, p, acts, dy, grads: Optional[dict] = None):
        grads = {} if grads is None else grads
        d = dy
        for k in range(self.n_layers - 1, -1, -1):
            if k < self.n_layers - 1 or self.relu_out:
                d = d * (acts[k + 1] > 0)
            h = acts[k]
            grads[f"{self.prefix}W{k}"] = h.reshape(-1, h.shape[-1]).T @ d.reshape(-1, d.shape[-1])
            grads[f"{self.prefix}b{k}"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
            d = d @ p[f"{self.prefix}W{k}"].T
        return grads, d


def dueling_combine(value, advantage):
    """``Q = V + A - mean_a A``; ``value`` has shape (..., 1)."""
    return value + advantage - advantage.mean(axis=-1, keepdims=True)


class DuelingNet:
    """ReLU trunk followed by value and advantage streams."""

    kind = "dueling"

    def __init__(self, n_in: int, n_actions: int, hidden=(128, 128)):
        self.n_in = n_in
        self.n_actions = n_actions
        self.hidden = tuple(hidden)
        self.trunk = MLP([n_in, *hidden], relu_out=True, prefix="trunk_")
        self.value = MLP([hidden[-1], 1], prefix="value_")
        self.adv = MLP([hidden[-1], n_actions], prefix="adv_")

    def init(self, rng, dtype=np.float64) -> NetParams:
        p = NetParams(self.kind)
        self.trunk.init_into(p, rng, dtype)
        self.value.init_into(p, rng, dtype)
        self.adv.init_into(p, rng, dtype)
        return p

    def forward(self, p, x):
        h, tc = self.trunk.forward(p, x)
        v, vc = self.value.forward(p, h)
        a, ac = self.adv.forward(p, h)
        return dueling_combine(v, a), (tc, vc, ac, v)

    def value_of(self, p, x):
        h, _ = self.trunk.forward(p, x)
        return self.value.forward(p, h)[0][..., 0]

    def backward(self, p, cache, dq):
        tc, vc, ac, _ = cache
        dv = dq.sum(axis=-1, keepdims=True)
        da = dq - dq.mean(axis=-1, keepdims=True)
        grads = {}
        _, dh_v = self.value.backward(p, vc, dv, grads)
        _, dh_a = self.adv.backward(p, ac, da, grads)
        _, dx = self.trunk.backward(p, tc, dh_v + dh_a, grads)
        return grads, dx


def mean_aggregator(adjacency: np.ndarray) -> np.ndarray:
    """Row-normalised adjacency; isolated nodes get an all-zero row."""
    a = adjacency.astype(np.float64)
    deg = a.sum(axis=1, keepdims=True)
    return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


class GNN:
    """Stacked mean-aggregation message passing layers.

    ``h_v' = relu(W_self h_v + W_nbr mean_{u in N(v)} h_u + b)``.
    Inputs are ``(L, F)`` or batched ``(B, L, F)``; the aggregator is the
    row-normalised adjacency from :func:`mean_aggregator`.
    """

    kind = "gnn"

    def __init__(self, n_in: int, hidden: int = 64, n_layers: int = 2):
        self.sizes = [n_in] + [hidden] * n_layers
        self.n_layers = n_layers

    @property
    def out_width(self) -> int:
        return self.sizes[-1]

    def init(self, rng, dtype=np.float64) -> NetParams:
        p = NetParams(self.kind)
        for k in range(self.n_layers):
            n_in, n_out = self.sizes[k], self.sizes[k + 1]
            bound = 1.0 / np.sqrt(2 * n_in)
            p[f"Wself{k}"] = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
            p[f"Wnbr{k}"] = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)
            p[f"b{k}"] = rng.uniform(-bound, bound, size=n_out).astype(dtype)
        return p

    def forward(self, p, x, agg):
        hs, ms = [x], []
        h = x
        for k in range(self.n_layers):
            m = agg @ h
            z = h @ p[f"Wself{k}"] + m @ p[f"Wnbr{k}"] + p[f"b{k}"]
            h = relu(z)
            hs.append(h)
            ms.append(m)
        return h, (hs, ms, agg)

    def backward(self, p, cache, dout):
        hs, ms, agg = cache
        grads = {}
        d = dout
        for k in range(self.n_layers - 1, -1, -1):
            dz = d * (hs[k + 1] > 0)
            h, m = hs[k], ms[k]
            flat_dz = dz.reshape(-1, dz.shape[-1])
            grads[f"Wself{k}"] = h.reshape(-1, h.shape[-1]).T @ flat_dz
            grads[f"Wnbr{k}"] = m.reshape(-1, m.shape[-1]).T @ flat_dz
            grads[f"b{k}"] = flat_dz.sum(axis=0)
            d = dz @ p[f"Wself{k}"].T + agg.T @ (dz @ p[f"Wnbr{k}"].T)
        return grads, d


class Adam:
    """Adam with bias correction and element-wise gradient clipping."""

    def __init__(self, params: NetParams, lr: float = 1e-3, clip: float = 3.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.clip = clip
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params: NetParams, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if self.clip is not None:
                g = np.clip(g, -self.clip, self.clip)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {"t": np.array(self.t)}
        out.update({f"m/{k}": v for k, v in self.m.items()})
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out


def adam_step(params: NetParams, grads: dict, opt: Adam) -> NetParams:
    opt.step(params, grads)
    return params


def check_finite_loss(loss: float) -> None:
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss}; update aborted")


def soft_update(main: NetParams, target: NetParams, tau: float) -> NetParams:
    """``tau * main + (1 - tau) * target``, element-wise."""
    if main.shapes() != target.shapes():
        raise ValueError("soft_update: shape mismatch")
    return NetParams(target.kind, {k: tau * main[k] + (1.0 - tau) * target[k] for k in target})


def finite_diff_check(loss_fn: Callable[[NetParams], float], params: NetParams, grads: dict,
                      epsilon: float = 1e-6, floor: float = 1e-4, max_entries: Optional[int] = None,
                      rng=None) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  With
    ``max_entries`` only a random subset of entries per array is probed.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        g = np.asarray(grads[name]).reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + epsilon
            up = loss_fn(params)
            flat[i] = old - epsilon
            down = loss_fn(params)
            flat[i] = old
            num = (up - down) / (2 * epsilon)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, nets: dict, meta: Optional[dict] = None) -> None:
    """Store several NetParams in one ``.npz`` with a JSON header."""
    arrays = {}
    header = {"format_version": CHECKPOINT_FORMAT_VERSION, "nets": {}, "meta": meta or {}}
    for net_name, p in nets.items():
        header["nets"][net_name] = {"kind": p.kind, "shapes": {k: list(s) for k, s in p.shapes().items()},
                                    "order": list(p.keys())}
        for k, v in p.items():
            arrays[f"{net_name}/{k}"] = v
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
        nets = {}
        for net_name, info in header["nets"].items():
            p = NetParams(info["kind"])
            for k in info["order"]:
                arr = data[f"{net_name}/{k}"].copy()
                if list(arr.shape) != info["shapes"][k]:
                    raise ValueError(f"{path}: shape mismatch for {net_name}/{k}")
                p[k] = arr
            nets[net_name] = p
    return nets, header["meta"]


def write_matrix_csv(path, matrix: np.ndarray, col_labels=None, row_labels=None) -> None:
    with open(path, "w") as fh:
        if col_labels is not None:
            fh.write("row," + ",".join(col_labels) + "\n")
        for i, row in enumerate(matrix):
            lead = f"{row_labels[i] if row_labels is not None else i},"
            fh.write(lead + ",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path) -> tuple[np.ndarray, list]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split(",")[1:]
    rows = [[float(v) for v in ln.split(",")[1:]] for ln in lines[1:]]
    return np.array(rows), cols
