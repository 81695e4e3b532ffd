"""Pure-numpy kernels (fallback backend).

Vectorized counterparts of `_kernels_numba` with identical signatures and
semantics. The box-QP solver is inherently sequential, so it reuses the
shared implementation uncompiled.
"""

import numpy as np

from . import _qp_impl

BACKEND_NAME = "numpy"

qp_box_active_set = _qp_impl.qp_box_active_set


def qp_box_repeat(H, q, lb, ub, tol, max_iter, reps):
    d = H.shape[0]
    sink = 0.0
    for _ in range(reps):
        z, active, status, iters, res = qp_box_active_set(
            H, q, lb, ub, np.zeros(d), np.zeros(d, dtype=np.int8), tol, max_iter)
        sink += z[0]
    return sink


def _route(a, b, depth, X):
    S = X.shape[0]
    node = np.ones(S, dtype=np.int64)
    for _ in range(depth):
        j = node - 1
        left = np.einsum("sk,sk->s", X, a[j]) <= b[j]
        node = 2 * node + np.where(left, 0, 1)
    return node - 2 ** depth


def tree_leaf_batch(a, b, depth, X):
    return _route(a, b, depth, X)


def tree_predict_one(a, b, c, d, depth, x):
    leaf = int(_route(a, b, depth, x[None, :])[0])
    return c[leaf].T @ x + d[leaf]


def tree_predict_batch(a, b, c, d, depth, X):
    leaf = _route(a, b, depth, X)
    return np.einsum("sk,skm->sm", X, c[leaf]) + d[leaf]


def tree_eval_repeat(a, b, c, d, depth, x, reps):
    sink = 0.0
    for _ in range(reps):
        sink += tree_predict_one(a, b, c, d, depth, x)[0]
    return sink


def _log_sigmoid_pair(az):
    """(log S(az), log(1 - S(az))) evaluated through softplus."""
    return -np.logaddexp(0.0, -az), -np.logaddexp(0.0, az)


def _log_weights(a, b, alpha, X, nodes, dirs):
    S = X.shape[0]
    L, D = nodes.shape
    if a.shape[0] == 0:
        return np.zeros((S, L)), None
    Z = b[None, :] - X @ a.T
    LL, LR = _log_sigmoid_pair(alpha * Z)
    logW = np.zeros((S, L))
    for k in range(D):
        nk = nodes[:, k]
        pick_right = dirs[:, k] != 0
        logW += np.where(pick_right[None, :], LR[:, nk], LL[:, nk])
    return logW, np.exp(LL)


def leaf_weights_batch(a, b, alpha, X, nodes, dirs):
    logW, _ = _log_weights(a, b, alpha, X, nodes, dirs)
    return np.exp(logW)


def soft_forward_batch(a, b, c, d, alpha, X, nodes, dirs):
    W = leaf_weights_batch(a, b, alpha, X, nodes, dirs)
    P = np.einsum("sn,lnm->slm", X, c) + d[None]
    return np.einsum("sl,slm->sm", W, P)


def _path_masks(nodes, dirs, n_branch):
    """0/1 matrices (leaf, branch): left-descendant and right-descendant."""
    L, D = nodes.shape
    Ml = np.zeros((L, n_branch))
    Mr = np.zeros((L, n_branch))
    rows = np.arange(L)
    for k in range(D):
        left = dirs[:, k] == 0
        Ml[rows[left], nodes[left, k]] = 1.0
        Mr[rows[~left], nodes[~left, k]] = 1.0
    return Ml, Mr


def soft_loss_grad(a, b, c, d, alpha, X, U, nodes, dirs):
    S, n = X.shape
    L, D = nodes.shape
    Bn = a.shape[0]
    m = d.shape[1]

    logW, Sig = _log_weights(a, b, alpha, X, nodes, dirs)
    W = np.exp(logW)

    P = np.einsum("sn,lnm->slm", X, c) + d[None]
    EV = U[:, None, :] - P
    E = np.einsum("slm,slm->sl", EV, EV)
    loss = float(np.sum(W * E))

    WEV = W[..., None] * EV
    gd = -2.0 * WEV.sum(axis=0)
    gc = -2.0 * np.einsum("sn,slm->lnm", X, WEV)

    if Bn == 0:
        return loss, np.zeros((0, n)), np.zeros(0), gc, gd

    Ml, Mr = _path_masks(nodes, dirs, Bn)
    WE = W * E
    Al = WE @ Ml
    Ar = WE @ Mr
    dZ = alpha * ((1.0 - Sig) * Al - Sig * Ar)
    gb = dZ.sum(axis=0)
    ga = -dZ.T @ X
    return loss, ga, gb, gc, gd
