# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: island labelling, DC network solve, sum-tree ops.

Keep the arithmetic order identical to ``_kernels_py.py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport malloc, calloc, free

cnp.import_array()

BACKEND = "cython"

DEF OK = 0
DEF UNSERVED_LOAD = 1
DEF SLACK_BOUNDS = 2
DEF SINGULAR = 3


cdef Py_ssize_t _find(Py_ssize_t* parent, Py_ssize_t a) noexcept nogil:
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


cdef Py_ssize_t _components(Py_ssize_t n, Py_ssize_t nb, const Py_ssize_t* fnode, const Py_ssize_t* tnode,
                            Py_ssize_t* labels) noexcept nogil:
    cdef Py_ssize_t* parent = <Py_ssize_t*>malloc((n + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* root_label = <Py_ssize_t*>malloc((n + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t i, ra, rb, count = 0
    for i in range(n):
        parent[i] = i
        root_label[i] = -1
    for i in range(nb):
        ra = _find(parent, fnode[i])
        rb = _find(parent, tnode[i])
        if ra != rb:
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb
    for i in range(n):
        ra = _find(parent, i)
        if root_label[ra] < 0:
            root_label[ra] = count
            count += 1
        labels[i] = root_label[ra]
    free(parent)
    free(root_label)
    return count


cdef bint _solve(Py_ssize_t n, Py_ssize_t nb, const Py_ssize_t* fnode, const Py_ssize_t* tnode,
                 const double* b, const double* p, const char* ref, double* theta) noexcept nogil:
    cdef Py_ssize_t i, j, k, m = 0, ia, ic
    cdef double s, d, bb
    cdef bint ok = True
    cdef Py_ssize_t* pos = <Py_ssize_t*>malloc((n + 1) * sizeof(Py_ssize_t))
    for i in range(n):
        if ref[i]:
            pos[i] = -1
        else:
            pos[i] = m
            m += 1
    cdef double* A = <double*>calloc(m * m + 1, sizeof(double))
    cdef double* Lc = <double*>calloc(m * m + 1, sizeof(double))
    cdef double* rhs = <double*>calloc(m + 1, sizeof(double))
    cdef double* y = <double*>calloc(m + 1, sizeof(double))
    cdef double* x = <double*>calloc(m + 1, sizeof(double))
    for k in range(nb):
        ia = pos[fnode[k]]
        ic = pos[tnode[k]]
        bb = b[k]
        if ia >= 0:
            A[ia * m + ia] += bb
        if ic >= 0:
            A[ic * m + ic] += bb
        if ia >= 0 and ic >= 0:
            A[ia * m + ic] -= bb
            A[ic * m + ia] -= bb
    for i in range(n):
        if pos[i] >= 0:
            rhs[pos[i]] = p[i]
    for j in range(m):
        s = A[j * m + j]
        for k in range(j):
            s -= Lc[j * m + k] * Lc[j * m + k]
        if not s > 0.0:
            ok = False
            break
        d = sqrt(s)
        Lc[j * m + j] = d
        for i in range(j + 1, m):
            s = A[i * m + j]
            for k in range(j):
                s -= Lc[i * m + k] * Lc[j * m + k]
            Lc[i * m + j] = s / d
    if ok:
        for i in range(m):
            s = rhs[i]
            for k in range(i):
                s -= Lc[i * m + k] * y[k]
            y[i] = s / Lc[i * m + i]
        for i in range(m - 1, -1, -1):
            s = y[i]
            for k in range(i + 1, m):
                s -= Lc[k * m + i] * x[k]
            x[i] = s / Lc[i * m + i]
    for i in range(n):
        if ok and pos[i] >= 0:
            theta[i] = x[pos[i]]
        else:
            theta[i] = 0.0
    free(pos)
    free(A)
    free(Lc)
    free(rhs)
    free(y)
    free(x)
    return ok


def components(Py_ssize_t n, const cnp.int64_t[:] fnode, const cnp.int64_t[:] tnode):
    cdef Py_ssize_t nb = fnode.shape[0], i
    cdef Py_ssize_t* f = <Py_ssize_t*>malloc((nb + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* t = <Py_ssize_t*>malloc((nb + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* lab = <Py_ssize_t*>malloc((n + 1) * sizeof(Py_ssize_t))
    labels = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[:] out = labels
    for i in range(nb):
        f[i] = fnode[i]
        t[i] = tnode[i]
    _components(n, nb, f, t, lab)
    for i in range(n):
        out[i] = lab[i]
    free(f)
    free(t)
    free(lab)
    return labels


def dc_angles(Py_ssize_t n, const cnp.int64_t[:] fnode, const cnp.int64_t[:] tnode,
              const double[:] b, const double[:] p, const cnp.uint8_t[:] is_ref):
    cdef Py_ssize_t nb = fnode.shape[0], i
    cdef Py_ssize_t* f = <Py_ssize_t*>malloc((nb + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* t = <Py_ssize_t*>malloc((nb + 1) * sizeof(Py_ssize_t))
    cdef double* bb = <double*>malloc((nb + 1) * sizeof(double))
    cdef double* pp = <double*>malloc((n + 1) * sizeof(double))
    cdef char* ref = <char*>malloc(n + 1)
    cdef double* th = <double*>calloc(n + 1, sizeof(double))
    theta = np.zeros(n)
    cdef double[:] out = theta
    cdef bint ok
    for i in range(nb):
        f[i] = fnode[i]
        t[i] = tnode[i]
        bb[i] = b[i]
    for i in range(n):
        pp[i] = p[i]
        ref[i] = is_ref[i] != 0
    ok = _solve(n, nb, f, t, bb, pp, ref, th)
    for i in range(n):
        out[i] = th[i]
    free(th)
    free(f)
    free(t)
    free(bb)
    free(pp)
    free(ref)
    return theta, bool(ok)


def dc_network(Py_ssize_t n_sub, const cnp.intp_t[:] lor_sub, const cnp.intp_t[:] lex_sub,
               const cnp.int8_t[:] lor_bus, const cnp.int8_t[:] lex_bus,
               const cnp.intp_t[:] gen_sub, const cnp.int8_t[:] gen_bus,
               const cnp.intp_t[:] load_sub, const cnp.int8_t[:] load_bus,
               const double[:] x, const double[:] gen_p, const double[:] gen_pmax,
               const double[:] load_p, Py_ssize_t slack_gen, double tol):
    cdef Py_ssize_t L = lor_sub.shape[0], G = gen_sub.shape[0], D = load_sub.shape[0]
    cdef Py_ssize_t S2 = 2 * n_sub
    cdef Py_ssize_t i, k, l, g, d, v, n = 0, nb = 0, n_isl, sg
    cdef int status = OK
    cdef Py_ssize_t culprit = -1
    cdef double s
    cdef bint ok

    node_of_a = np.full(S2, -1, dtype=np.int64)
    flow_a = np.zeros(L)
    gen_out_a = np.empty(G)
    cdef cnp.int64_t[:] node_of = node_of_a
    cdef double[:] flow = flow_a
    cdef double[:] gen_out = gen_out_a

    cdef char* used = <char*>calloc(S2 + 1, 1)
    for l in range(L):
        if lor_bus[l] > 0:
            used[2 * lor_sub[l] + lor_bus[l] - 1] = 1
        if lex_bus[l] > 0:
            used[2 * lex_sub[l] + lex_bus[l] - 1] = 1
    for g in range(G):
        if gen_bus[g] > 0:
            used[2 * gen_sub[g] + gen_bus[g] - 1] = 1
    for d in range(D):
        if load_bus[d] > 0:
            used[2 * load_sub[d] + load_bus[d] - 1] = 1
    for k in range(S2):
        if used[k]:
            node_of[k] = n
            n += 1
    free(used)

    cdef Py_ssize_t* fnode = <Py_ssize_t*>malloc((L + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* tnode = <Py_ssize_t*>malloc((L + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* br = <Py_ssize_t*>malloc((L + 1) * sizeof(Py_ssize_t))
    cdef double* bsus = <double*>malloc((L + 1) * sizeof(double))
    for l in range(L):
        if lor_bus[l] > 0 and lex_bus[l] > 0:
            br[nb] = l
            fnode[nb] = node_of[2 * lor_sub[l] + lor_bus[l] - 1]
            tnode[nb] = node_of[2 * lex_sub[l] + lex_bus[l] - 1]
            bsus[nb] = 1.0 / x[l]
            nb += 1

    labels_a = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[:] labels_out = labels_a
    cdef Py_ssize_t* labels = <Py_ssize_t*>malloc((n + 1) * sizeof(Py_ssize_t))
    n_isl = _components(n, nb, fnode, tnode, labels)

    cdef Py_ssize_t* gnode = <Py_ssize_t*>malloc((G + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* dnode = <Py_ssize_t*>malloc((D + 1) * sizeof(Py_ssize_t))
    cdef double* isl_load = <double*>calloc(n_isl + 1, sizeof(double))
    cdef Py_ssize_t* isl_slack = <Py_ssize_t*>malloc((n_isl + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* first = <Py_ssize_t*>malloc((n_isl + 1) * sizeof(Py_ssize_t))
    cdef char* ref = <char*>calloc(n + 1, 1)
    cdef double* p = <double*>calloc(n + 1, sizeof(double))
    cdef double* theta = <double*>calloc(n + 1, sizeof(double))

    for g in range(G):
        gnode[g] = node_of[2 * gen_sub[g] + gen_bus[g] - 1] if gen_bus[g] > 0 else -1
        gen_out[g] = gen_p[g] if gnode[g] >= 0 else 0.0
    for d in range(D):
        dnode[d] = node_of[2 * load_sub[d] + load_bus[d] - 1] if load_bus[d] > 0 else -1
    for k in range(n_isl):
        isl_slack[k] = -1
        first[k] = -1
    for d in range(D):
        if dnode[d] >= 0:
            isl_load[labels[dnode[d]]] += load_p[d]
    for g in range(G):
        if gnode[g] >= 0:
            k = labels[gnode[g]]
            if isl_slack[k] < 0:
                isl_slack[k] = g
    if gnode[slack_gen] >= 0:
        isl_slack[labels[gnode[slack_gen]]] = slack_gen

    for v in range(n - 1, -1, -1):
        first[labels[v]] = v
    for k in range(n_isl):
        sg = isl_slack[k]
        if sg < 0:
            ref[first[k]] = 1
            if isl_load[k] > 0.0 and status == OK:
                status = UNSERVED_LOAD
                culprit = k
            continue
        s = isl_load[k]
        for g in range(G):
            if g != sg and gnode[g] >= 0 and labels[gnode[g]] == k:
                s -= gen_out[g]
        gen_out[sg] = s
        if (s > (1.0 + tol) * gen_pmax[sg] or s < -tol * gen_pmax[sg]) and status == OK:
            status = SLACK_BOUNDS
            culprit = sg
        ref[gnode[sg]] = 1

    for g in range(G):
        if gnode[g] >= 0:
            p[gnode[g]] += gen_out[g]
    for d in range(D):
        if dnode[d] >= 0:
            p[dnode[d]] -= load_p[d]
    for v in range(n):
        if isl_slack[labels[v]] < 0:
            p[v] = 0.0

    ok = _solve(n, nb, fnode, tnode, bsus, p, ref, theta)
    if not ok and status == OK:
        status = SINGULAR
    if ok:
        for i in range(nb):
            l = br[i]
            flow[l] = (theta[fnode[i]] - theta[tnode[i]]) / x[l]

    theta_a = np.empty(n)
    cdef double[:] th = theta_a
    for v in range(n):
        th[v] = theta[v]
        labels_out[v] = labels[v]

    free(fnode)
    free(tnode)
    free(br)
    free(bsus)
    free(labels)
    free(gnode)
    free(dnode)
    free(isl_load)
    free(isl_slack)
    free(first)
    free(ref)
    free(p)
    free(theta)
    return node_of_a, theta_a, flow_a, gen_out_a, labels_a, status, culprit


def sumtree_set(double[:] tree, Py_ssize_t cap, Py_ssize_t idx, double value):
    cdef Py_ssize_t k = cap + idx
    tree[k] = value
    k //= 2
    while k >= 1:
        tree[k] = tree[2 * k] + tree[2 * k + 1]
        k //= 2


def sumtree_find(const double[:] tree, Py_ssize_t cap, const double[:] prefixes):
    cdef Py_ssize_t j, k, nq = prefixes.shape[0]
    cdef double u, left
    out = np.empty(nq, dtype=np.int64)
    cdef cnp.int64_t[:] o = out
    with nogil:
        for j in range(nq):
            u = prefixes[j]
            k = 1
            while k < cap:
                left = tree[2 * k]
                if u < left or tree[2 * k + 1] <= 0.0:
                    k = 2 * k
                else:
                    u -= left
                    k = 2 * k + 1
            o[j] = k - cap
    return out
