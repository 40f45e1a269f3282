import numpy as np
import pytest

from gridrl.nn import (GNN, MLP, Adam, DuelingNet, NetParams, NonFiniteLossError, check_finite_loss,
                       dueling_combine, finite_diff_check, load_checkpoint, mean_aggregator, read_matrix_csv,
                       save_checkpoint, soft_update, write_matrix_csv)


def _path_adj(n):
    a = np.zeros((n, n), dtype=np.int8)
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1
    return a


# gradient checks: sum(out * W) with a fixed random W as the scalar loss

def test_mlp_gradients():
    rng = np.random.default_rng(0)
    net = MLP([5, 8, 3])
    p = net.init(rng)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 3))
    out, acts = net.forward(p, x)
    grads, _ = net.backward(p, acts, w)
    assert finite_diff_check(lambda q: float(np.sum(net.forward(q, x)[0] * w)), p, grads) < 1e-4


def test_mlp_input_gradient():
    rng = np.random.default_rng(1)
    net = MLP([4, 6, 2])
    p = net.init(rng)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 2))
    _, acts = net.forward(p, x)
    _, dx = net.backward(p, acts, w)
    xp = NetParams("x", {"x": x.copy()})
    err = finite_diff_check(lambda q: float(np.sum(net.forward(p, q["x"])[0] * w)), xp, {"x": dx})
    assert err < 1e-4


def test_dueling_gradients():
    rng = np.random.default_rng(2)
    net = DuelingNet(6, 5, hidden=(16, 16))
    p = net.init(rng)
    x = rng.normal(size=(7, 6))
    w = rng.normal(size=(7, 5))
    q, cache = net.forward(p, x)
    grads, _ = net.backward(p, cache, w)
    assert finite_diff_check(lambda r: float(np.sum(net.forward(r, x)[0] * w)), p, grads) < 1e-4


def test_gnn_gradients():
    rng = np.random.default_rng(3)
    n = 6
    adj = (rng.random((n, n)) < 0.4).astype(np.int8)
    adj = np.triu(adj, 1)
    adj = adj + adj.T
    agg = mean_aggregator(adj)
    net = GNN(4, hidden=8, n_layers=2)
    p = net.init(rng)
    x = rng.normal(size=(n, 4))
    w = rng.normal(size=(n, 8))
    h, cache = net.forward(p, x, agg)
    grads, _ = net.backward(p, cache, w)
    assert finite_diff_check(lambda r: float(np.sum(net.forward(r, x, agg)[0] * w)), p, grads) < 1e-4


def test_gnn_batched_matches_loop():
    rng = np.random.default_rng(4)
    agg = mean_aggregator(_path_adj(4))
    net = GNN(3, hidden=5)
    p = net.init(rng)
    xb = rng.normal(size=(2, 4, 3))
    hb, _ = net.forward(p, xb, agg)
    for i in range(2):
        np.testing.assert_allclose(hb[i], net.forward(p, xb[i], agg)[0], atol=1e-14)


def test_linear_fd_near_exact():
    rng = np.random.default_rng(5)
    net = MLP([3, 2])
    p = net.init(rng)
    x = rng.normal(size=(2, 3))
    w = rng.normal(size=(2, 2))
    _, acts = net.forward(p, x)
    grads, _ = net.backward(p, acts, w)
    assert finite_diff_check(lambda q: float(np.sum(net.forward(q, x)[0] * w)), p, grads, epsilon=1e-3) < 1e-9


def test_fd_rejects_bad_epsilon():
    p = NetParams("x", {"a": np.zeros(2)})
    with pytest.raises(ValueError):
        finite_diff_check(lambda q: 0.0, p, {"a": np.zeros(2)}, epsilon=0.0)


# dueling head

def test_dueling_advantage_mean_zero():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(5, 1))
    a = rng.normal(size=(5, 4))
    q = dueling_combine(v, a)
    np.testing.assert_allclose(q.mean(axis=1), v[:, 0], atol=1e-12)


def test_dueling_single_action_equals_value():
    rng = np.random.default_rng(7)
    net = DuelingNet(3, 1, hidden=(4,))
    p = net.init(rng)
    x = rng.normal(size=(2, 3))
    q, _ = net.forward(p, x)
    np.testing.assert_allclose(q[:, 0], net.value_of(p, x), atol=1e-14)


def test_dueling_shapes():
    net = DuelingNet(10, 5)
    p = net.init(np.random.default_rng(0))
    assert p["trunk_W0"].shape == (10, 128) and p["trunk_W1"].shape == (128, 128)
    assert p["adv_W0"].shape == (128, 5) and p["value_W0"].shape == (128, 1)
    assert net.forward(p, np.zeros((3, 10)))[0].shape == (3, 5)


# GNN

def test_gnn_hand_computed_path():
    """3-node path, identity-ish weights, one layer."""
    agg = mean_aggregator(_path_adj(3))
    np.testing.assert_allclose(agg, [[0, 1, 0], [0.5, 0, 0.5], [0, 1, 0]])
    net = GNN(1, hidden=1, n_layers=1)
    p = NetParams("gnn", {"Wself0": np.array([[1.0]]), "Wnbr0": np.array([[2.0]]), "b0": np.array([0.0])})
    x = np.array([[1.0], [2.0], [3.0]])
    h, _ = net.forward(p, x, agg)
    np.testing.assert_allclose(h[:, 0], [1 + 2 * 2, 2 + 2 * 2, 3 + 2 * 2])


def test_gnn_permutation_equivariance():
    rng = np.random.default_rng(8)
    n = 7
    adj = np.triu((rng.random((n, n)) < 0.5).astype(np.int8), 1)
    adj = adj + adj.T
    net = GNN(3, hidden=6)
    p = net.init(rng)
    x = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    h = net.forward(p, x, mean_aggregator(adj))[0]
    hp = net.forward(p, x[perm], mean_aggregator(adj[np.ix_(perm, perm)]))[0]
    np.testing.assert_allclose(hp, h[perm], atol=1e-12)


def test_gnn_isolated_node_uses_self_only():
    adj = np.zeros((3, 3), dtype=np.int8)
    adj[0, 1] = adj[1, 0] = 1
    agg = mean_aggregator(adj)
    assert np.all(agg[2] == 0)
    net = GNN(2, hidden=4, n_layers=1)
    p = net.init(np.random.default_rng(9))
    x = np.random.default_rng(10).normal(size=(3, 2))
    h = net.forward(p, x, agg)[0]
    np.testing.assert_allclose(h[2], np.maximum(x[2] @ p["Wself0"] + p["b0"], 0))


def test_gnn_default_shapes():
    p = GNN(42).init(np.random.default_rng(0))
    assert p.shapes() == {"Wself0": (42, 64), "Wnbr0": (42, 64), "b0": (64,),
                          "Wself1": (64, 64), "Wnbr1": (64, 64), "b1": (64,)}


# optimizer and updates

def test_adam_clips_elementwise():
    p = NetParams("x", {"w": np.zeros(2)})
    a = Adam(p, lr=0.1, clip=3.0)
    a.step(p, {"w": np.array([10.0, -1.0])})
    # after one bias-corrected step the update is lr * sign(g); clipping shows in the moments
    np.testing.assert_allclose(a.m["w"], [0.3, -0.1])
    np.testing.assert_allclose(a.v["w"], [0.009, 0.001])
    np.testing.assert_allclose(p["w"], [-0.1, 0.1], atol=1e-6)


def test_adam_minimises_quadratic():
    p = NetParams("x", {"w": np.array([5.0, -3.0])})
    a = Adam(p, lr=0.1)
    for _ in range(500):
        a.step(p, {"w": 2 * p["w"]})
    assert np.all(np.abs(p["w"]) < 1e-2)


def test_soft_update_cases():
    m = NetParams("x", {"w": np.array([1.0, 2.0])})
    t = NetParams("x", {"w": np.array([3.0, 6.0])})
    np.testing.assert_array_equal(soft_update(m, t, 1.0)["w"], m["w"])
    np.testing.assert_array_equal(soft_update(m, t, 0.0)["w"], t["w"])
    np.testing.assert_allclose(soft_update(m, t, 0.25)["w"], [2.5, 5.0])
    with pytest.raises(ValueError):
        soft_update(m, NetParams("x", {"w": np.zeros(3)}), 0.5)


def test_soft_update_contracts_distance():
    rng = np.random.default_rng(11)
    m = NetParams("x", {"w": rng.normal(size=10)})
    t = NetParams("x", {"w": rng.normal(size=10)})
    d0 = np.linalg.norm(m["w"] - t["w"])
    for _ in range(10):
        t = soft_update(m, t, 0.1)
    np.testing.assert_allclose(np.linalg.norm(m["w"] - t["w"]), 0.9 ** 10 * d0)


def test_non_finite_loss():
    check_finite_loss(1.0)
    for bad in (np.nan, np.inf):
        with pytest.raises(NonFiniteLossError):
            check_finite_loss(bad)


# persistence

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    nets = {"a": DuelingNet(4, 3, (8,)).init(rng), "b": GNN(4, 5).init(rng)}
    save_checkpoint(tmp_path / "c.npz", nets, {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta == {"note": "x"}
    for k in nets:
        assert back[k].kind == nets[k].kind and list(back[k]) == list(nets[k])
        for name in nets[k]:
            np.testing.assert_array_equal(back[k][name], nets[k][name])


def test_checkpoint_version_mismatch(tmp_path):
    import json
    save_checkpoint(tmp_path / "c.npz", {"a": MLP([2, 2]).init(np.random.default_rng(0))})
    with np.load(tmp_path / "c.npz") as d:
        arrays = dict(d)
    header = json.loads(bytes(arrays["__header__"]).decode())
    header["format_version"] = 99
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(tmp_path / "bad.npz")


def test_matrix_csv_round_trip(tmp_path):
    m = np.random.default_rng(13).normal(size=(3, 4))
    write_matrix_csv(tmp_path / "m.csv", m, col_labels=list("abcd"))
    back, cols = read_matrix_csv(tmp_path / "m.csv")
    assert cols == list("abcd")
    np.testing.assert_array_equal(back, m)
