"""Numba-compiled kernels (default backend).

Loop-style implementations of the hot paths: box-QP active set, hard tree
routing, and the smoothed-tree loss/gradient. Signatures match
`_kernels_numpy` exactly; `_accel` picks one module at import time.
"""

import numpy as np
from numba import njit

from . import _qp_impl

BACKEND_NAME = "numba"

qp_box_active_set = njit(cache=True, nogil=True)(_qp_impl.qp_box_active_set)


@njit(cache=True, nogil=True)
def qp_box_repeat(H, q, lb, ub, tol, max_iter, reps):
    """Solve the same box QP `reps` times cold; returns a sink value."""
    d = H.shape[0]
    sink = 0.0
    for _ in range(reps):
        z0 = np.zeros(d)
        a0 = np.zeros(d, dtype=np.int8)
        z, active, status, iters, res = qp_box_active_set(
            H, q, lb, ub, z0, a0, tol, max_iter)
        sink += z[0]
    return sink


@njit(cache=True, nogil=True)
def tree_leaf_batch(a, b, depth, X):
    """0-based leaf array index for every row of X (ties route left)."""
    S = X.shape[0]
    n = X.shape[1]
    out = np.empty(S, dtype=np.int64)
    base = 2 ** depth
    for s in range(S):
        node = 1
        for _ in range(depth):
            j = node - 1
            acc = 0.0
            for k in range(n):
                acc += a[j, k] * X[s, k]
            if acc <= b[j]:
                node = 2 * node
            else:
                node = 2 * node + 1
        out[s] = node - base
    return out


@njit(cache=True, nogil=True)
def tree_predict_one(a, b, c, d, depth, x):
    n = x.shape[0]
    m = d.shape[1]
    node = 1
    for _ in range(depth):
        j = node - 1
        acc = 0.0
        for k in range(n):
            acc += a[j, k] * x[k]
        if acc <= b[j]:
            node = 2 * node
        else:
            node = 2 * node + 1
    leaf = node - 2 ** depth
    u = np.empty(m)
    for col in range(m):
        acc = d[leaf, col]
        for k in range(n):
            acc += c[leaf, k, col] * x[k]
        u[col] = acc
    return u


@njit(cache=True, nogil=True)
def tree_predict_batch(a, b, c, d, depth, X):
    S = X.shape[0]
    n = X.shape[1]
    m = d.shape[1]
    out = np.empty((S, m))
    for s in range(S):
        node = 1
        for _ in range(depth):
            j = node - 1
            acc = 0.0
            for k in range(n):
                acc += a[j, k] * X[s, k]
            if acc <= b[j]:
                node = 2 * node
            else:
                node = 2 * node + 1
        leaf = node - 2 ** depth
        for col in range(m):
            acc = d[leaf, col]
            for k in range(n):
                acc += c[leaf, k, col] * X[s, k]
            out[s, col] = acc
    return out


@njit(cache=True, nogil=True)
def tree_eval_repeat(a, b, c, d, depth, x, reps):
    """Evaluate the tree at x `reps` times; returns a sink value."""
    sink = 0.0
    for _ in range(reps):
        u = tree_predict_one(a, b, c, d, depth, x)
        sink += u[0]
    return sink


@njit(cache=True, nogil=True)
def leaf_weights_batch(a, b, alpha, X, nodes, dirs):
    """Soft routing weights, one row per sample, one column per leaf.

    Products of path sigmoids are accumulated in log space (softplus form)
    so deep trees at large sharpness neither overflow nor lose the
    sum-to-one property beyond rounding.
    """
    S = X.shape[0]
    n = X.shape[1]
    L = nodes.shape[0]
    D = nodes.shape[1]
    Bn = a.shape[0]
    W = np.empty((S, L))
    ll = np.empty(Bn)
    lr = np.empty(Bn)
    for s in range(S):
        for j in range(Bn):
            zj = b[j]
            for k in range(n):
                zj -= a[j, k] * X[s, k]
            azj = alpha * zj
            if azj >= 0.0:
                t = np.log1p(np.exp(-azj))
                ll[j] = -t
                lr[j] = -azj - t
            else:
                t = np.log1p(np.exp(azj))
                ll[j] = azj - t
                lr[j] = -t
        for leaf in range(L):
            logw = 0.0
            for k in range(D):
                j = nodes[leaf, k]
                if dirs[leaf, k] == 0:
                    logw += ll[j]
                else:
                    logw += lr[j]
            W[s, leaf] = np.exp(logw)
    return W


@njit(cache=True, nogil=True)
def soft_forward_batch(a, b, c, d, alpha, X, nodes, dirs):
    """Weight-blended prediction sum_t w_t (c_t' x + d_t)."""
    S = X.shape[0]
    n = X.shape[1]
    L = nodes.shape[0]
    m = d.shape[1]
    W = leaf_weights_batch(a, b, alpha, X, nodes, dirs)
    out = np.zeros((S, m))
    for s in range(S):
        for leaf in range(L):
            w = W[s, leaf]
            if w == 0.0:
                continue
            for col in range(m):
                acc = d[leaf, col]
                for k in range(n):
                    acc += c[leaf, k, col] * X[s, k]
                out[s, col] += w * acc
    return out


@njit(cache=True, nogil=True)
def soft_loss_grad(a, b, c, d, alpha, X, U, nodes, dirs):
    """Smoothed objective and its exact gradients.

    loss = sum_s sum_t w_t(x_s) ||u_s - (c_t' x_s + d_t)||^2 with w_t the
    product of path sigmoids at sharpness alpha. Returns
    (loss, d/da, d/db, d/dc, d/dd) with the same shapes as a, b, c, d.
    """
    S = X.shape[0]
    n = X.shape[1]
    L = nodes.shape[0]
    D = nodes.shape[1]
    Bn = a.shape[0]
    m = d.shape[1]

    loss = 0.0
    ga = np.zeros((Bn, n))
    gb = np.zeros(Bn)
    gc = np.zeros((L, n, m))
    gd = np.zeros((L, m))

    ll = np.empty(Bn)
    lr = np.empty(Bn)
    sig = np.empty(Bn)
    ev = np.empty(m)

    for s in range(S):
        for j in range(Bn):
            zj = b[j]
            for k in range(n):
                zj -= a[j, k] * X[s, k]
            azj = alpha * zj
            if azj >= 0.0:
                e = np.exp(-azj)
                t = np.log1p(e)
                ll[j] = -t
                lr[j] = -azj - t
                sig[j] = 1.0 / (1.0 + e)
            else:
                e = np.exp(azj)
                t = np.log1p(e)
                ll[j] = azj - t
                lr[j] = -t
                sig[j] = e / (1.0 + e)

        for leaf in range(L):
            logw = 0.0
            for k in range(D):
                j = nodes[leaf, k]
                if dirs[leaf, k] == 0:
                    logw += ll[j]
                else:
                    logw += lr[j]
            w = np.exp(logw)

            e2 = 0.0
            for col in range(m):
                p = d[leaf, col]
                for k in range(n):
                    p += c[leaf, k, col] * X[s, k]
                r = U[s, col] - p
                ev[col] = r
                e2 += r * r
            loss += w * e2

            tw = 2.0 * w
            for col in range(m):
                gd[leaf, col] -= tw * ev[col]
                for k in range(n):
                    gc[leaf, k, col] -= tw * ev[col] * X[s, k]

            we = w * e2
            for k in range(D):
                j = nodes[leaf, k]
                if dirs[leaf, k] == 0:
                    qq = alpha * (1.0 - sig[j]) * we
                else:
                    qq = -alpha * sig[j] * we
                gb[j] += qq
                for kk in range(n):
                    ga[j, kk] -= qq * X[s, kk]

    return loss, ga, gb, gc, gd
