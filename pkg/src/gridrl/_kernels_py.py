"""Pure-Python kernels.

Loop-for-loop mirror of ``_kernels.pyx``: the floating-point operations run in
the same order, so both backends return bit-identical results.
"""
import math

import numpy as np

BACKEND = "python"

OK = 0
UNSERVED_LOAD = 1
SLACK_BOUNDS = 2
SINGULAR = 3


def _find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


def _components(n, fnode, tnode):
    parent = list(range(n))
    for a, b in zip(fnode, tnode):
        ra, rb = _find(parent, a), _find(parent, b)
        if ra != rb:
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb
    labels = [0] * n
    root_label = [-1] * n
    count = 0
    for i in range(n):
        r = _find(parent, i)
        if root_label[r] < 0:
            root_label[r] = count
            count += 1
        labels[i] = root_label[r]
    return labels, count


def components(n, fnode, tnode):
    """Connected-component labels of an ``n``-node graph, numbered by first node."""
    labels, _ = _components(n, fnode.tolist(), tnode.tolist())
    return np.array(labels, dtype=np.int64)


def _solve(n, fnode, tnode, b, p, ref):
    pos = [-1] * n
    m = 0
    for i in range(n):
        if not ref[i]:
            pos[i] = m
            m += 1
    A = [[0.0] * m for _ in range(m)]
    for a, c, bb in zip(fnode, tnode, b):
        ia, ic = pos[a], pos[c]
        if ia >= 0:
            A[ia][ia] += bb
        if ic >= 0:
            A[ic][ic] += bb
        if ia >= 0 and ic >= 0:
            A[ia][ic] -= bb
            A[ic][ia] -= bb
    rhs = [0.0] * m
    for i in range(n):
        if pos[i] >= 0:
            rhs[pos[i]] = p[i]

    Lc = [[0.0] * m for _ in range(m)]
    for j in range(m):
        s = A[j][j]
        Lj = Lc[j]
        for k in range(j):
            s -= Lj[k] * Lj[k]
        if not s > 0.0:
            return [0.0] * n, False
        d = math.sqrt(s)
        Lj[j] = d
        for i in range(j + 1, m):
            Li = Lc[i]
            s = A[i][j]
            for k in range(j):
                s -= Li[k] * Lj[k]
            Li[j] = s / d

    y = [0.0] * m
    for i in range(m):
        s = rhs[i]
        Li = Lc[i]
        for k in range(i):
            s -= Li[k] * y[k]
        y[i] = s / Li[i]
    x = [0.0] * m
    for i in range(m - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, m):
            s -= Lc[k][i] * x[k]
        x[i] = s / Lc[i][i]
    theta = [0.0] * n
    for i in range(n):
        if pos[i] >= 0:
            theta[i] = x[pos[i]]
    return theta, True


def dc_angles(n, fnode, tnode, b, p, is_ref):
    """Solve the reduced Laplacian system ``B theta = p`` with ``theta[ref] = 0``.

    Returns ``(theta, ok)``; ``ok`` is False when the Cholesky factorisation
    meets a non-positive pivot (singular reduced matrix).
    """
    theta, ok = _solve(n, fnode.tolist(), tnode.tolist(), b.tolist(), p.tolist(), is_ref.tolist())
    return np.array(theta), ok


def dc_network(n_sub, lor_sub, lex_sub, lor_bus, lex_bus, gen_sub, gen_bus, load_sub, load_bus,
               x, gen_p, gen_pmax, load_p, slack_gen, tol):
    """Full DC solve from bus assignments.

    Returns ``(node_of, theta, flow, gen_out, labels, status, culprit)`` where
    ``status`` is one of OK / UNSERVED_LOAD / SLACK_BOUNDS / SINGULAR and
    ``culprit`` the offending island or generator (first failure wins).
    """
    lor_sub, lex_sub, lor_bus, lex_bus = lor_sub.tolist(), lex_sub.tolist(), lor_bus.tolist(), lex_bus.tolist()
    gen_sub, gen_bus, load_sub, load_bus = gen_sub.tolist(), gen_bus.tolist(), load_sub.tolist(), load_bus.tolist()
    x, gen_in, gen_pmax, load_p = x.tolist(), gen_p.tolist(), gen_pmax.tolist(), load_p.tolist()
    L, G, D = len(lor_sub), len(gen_sub), len(load_sub)

    used = [False] * (2 * n_sub)
    for l in range(L):
        if lor_bus[l] > 0:
            used[2 * lor_sub[l] + lor_bus[l] - 1] = True
        if lex_bus[l] > 0:
            used[2 * lex_sub[l] + lex_bus[l] - 1] = True
    for g in range(G):
        if gen_bus[g] > 0:
            used[2 * gen_sub[g] + gen_bus[g] - 1] = True
    for d in range(D):
        if load_bus[d] > 0:
            used[2 * load_sub[d] + load_bus[d] - 1] = True
    node_of = [-1] * (2 * n_sub)
    n = 0
    for k in range(2 * n_sub):
        if used[k]:
            node_of[k] = n
            n += 1

    fnode, tnode, bsus, br = [], [], [], []
    for l in range(L):
        if lor_bus[l] > 0 and lex_bus[l] > 0:
            br.append(l)
            fnode.append(node_of[2 * lor_sub[l] + lor_bus[l] - 1])
            tnode.append(node_of[2 * lex_sub[l] + lex_bus[l] - 1])
            bsus.append(1.0 / x[l])
    labels, n_isl = _components(n, fnode, tnode)

    gnode = [node_of[2 * gen_sub[g] + gen_bus[g] - 1] if gen_bus[g] > 0 else -1 for g in range(G)]
    dnode = [node_of[2 * load_sub[d] + load_bus[d] - 1] if load_bus[d] > 0 else -1 for d in range(D)]
    gen_out = [gen_in[g] if gnode[g] >= 0 else 0.0 for g in range(G)]
    isl_load = [0.0] * n_isl
    for d in range(D):
        if dnode[d] >= 0:
            isl_load[labels[dnode[d]]] += load_p[d]
    isl_slack = [-1] * n_isl
    for g in range(G):
        if gnode[g] >= 0:
            k = labels[gnode[g]]
            if isl_slack[k] < 0:
                isl_slack[k] = g
    if gnode[slack_gen] >= 0:
        isl_slack[labels[gnode[slack_gen]]] = slack_gen

    status, culprit = OK, -1
    ref = [False] * n
    first = [-1] * n_isl
    for v in range(n - 1, -1, -1):
        first[labels[v]] = v
    for k in range(n_isl):
        sg = isl_slack[k]
        if sg < 0:
            ref[first[k]] = True
            if isl_load[k] > 0.0 and status == OK:
                status, culprit = UNSERVED_LOAD, k
            continue
        s = isl_load[k]
        for g in range(G):
            if g != sg and gnode[g] >= 0 and labels[gnode[g]] == k:
                s -= gen_out[g]
        gen_out[sg] = s
        if (s > (1.0 + tol) * gen_pmax[sg] or s < -tol * gen_pmax[sg]) and status == OK:
            status, culprit = SLACK_BOUNDS, sg
        ref[gnode[sg]] = True

    p = [0.0] * n
    for g in range(G):
        if gnode[g] >= 0:
            p[gnode[g]] += gen_out[g]
    for d in range(D):
        if dnode[d] >= 0:
            p[dnode[d]] -= load_p[d]
    for v in range(n):
        if isl_slack[labels[v]] < 0:
            p[v] = 0.0

    theta, ok = _solve(n, fnode, tnode, bsus, p, ref)
    if not ok and status == OK:
        status = SINGULAR
    flow = [0.0] * L
    if ok:
        for j, l in enumerate(br):
            flow[l] = (theta[fnode[j]] - theta[tnode[j]]) / x[l]
    return (np.array(node_of, dtype=np.int64), np.array(theta), np.array(flow), np.array(gen_out),
            np.array(labels, dtype=np.int64), status, culprit)


def sumtree_set(tree, cap, idx, value):
    """Set leaf ``idx`` to ``value`` and recompute its ancestors."""
    k = cap + idx
    tree[k] = value
    k //= 2
    while k >= 1:
        tree[k] = tree[2 * k] + tree[2 * k + 1]
        k //= 2


def sumtree_find(tree, cap, prefixes):
    """Leaf indices whose cumulative-sum interval contains each prefix value."""
    out = np.empty(len(prefixes), dtype=np.int64)
    t = tree.tolist()
    for j, u in enumerate(prefixes.tolist()):
        k = 1
        while k < cap:
            left = t[2 * k]
            if u < left or t[2 * k + 1] <= 0.0:
                k = 2 * k
            else:
                u -= left
                k = 2 * k + 1
        out[j] = k - cap
    return out
