"""Smoothed-routing training of oblique trees on MPC datasets.

The branch indicator I(a'x <= b) is relaxed to a sigmoid of sharpness alpha,
so each sample reaches every leaf with a product-of-sigmoids weight and the
fit objective is the weighted sum of per-leaf squared errors:

    loss = sum_s sum_t w_t(x_s) ||u_s - (c_t' x_s + d_t)||^2

which is smooth in all parameters. Training anneals alpha geometrically per
epoch toward hard routing while Adam updates the parameters, then freezes
the splits and refits every leaf by (ridge-stabilized) least squares on the
samples it actually receives.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import Diverged, ValidationError
from .tree import ObliqueTree, leaf_paths

_SPLIT_STREAM = 0x5EED
_RESTART_STREAM = 0x7133


def _as_xy(data):
    """Accept a Dataset or a plain (X, U) pair."""
    if hasattr(data, "X") and hasattr(data, "U"):
        X, U = data.X, data.U
    else:
        X, U = data
    X = np.ascontiguousarray(X, dtype=np.float64)
    U = np.ascontiguousarray(U, dtype=np.float64)
    if X.ndim != 2 or U.ndim != 2 or X.shape[0] != U.shape[0]:
        raise ValidationError("X and U must be 2-D with matching row counts")
    return X, U


@dataclass
class SoftTreeParams:
    """Trainable arrays of a complete oblique tree plus the routing sharpness.

    Same layout as ObliqueTree: a (2^D - 1, n) split vectors, b (2^D - 1,)
    offsets, c (2^D, n, m) leaf gains, d (2^D, m) leaf offsets.
    """

    depth: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        B, L = 2 ** self.depth - 1, 2 ** self.depth
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        self.c = np.ascontiguousarray(self.c, dtype=np.float64)
        self.d = np.ascontiguousarray(self.d, dtype=np.float64)
        if self.a.shape[0] != B or self.c.shape[0] != L:
            raise ValidationError("array sizes do not match the stated depth")
        if not self.alpha > 0:
            raise ValidationError("alpha must be > 0")

    @property
    def n(self):
        return self.c.shape[1]

    @property
    def m(self):
        return self.c.shape[2]

    def copy(self):
        return SoftTreeParams(self.depth, self.a.copy(), self.b.copy(),
                              self.c.copy(), self.d.copy(), self.alpha)

    def pack(self):
        """Flatten (a, b, c, d) into one vector (finite-difference helper)."""
        return np.concatenate([self.a.ravel(), self.b.ravel(),
                               self.c.ravel(), self.d.ravel()])

    def unpack(self, flat):
        sizes = [self.a.size, self.b.size, self.c.size, self.d.size]
        off = 0
        for arr, size in zip((self.a, self.b, self.c, self.d), sizes):
            arr.ravel()[:] = flat[off:off + size]
            off += size

    def as_tree(self) -> ObliqueTree:
        return ObliqueTree(depth=self.depth, branch_a=self.a.copy(),
                           branch_b=self.b.copy(), leaf_c=self.c.copy(),
                           leaf_d=self.d.copy())


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1024
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha_start: float = 1.0
    alpha_growth: float = 1.3
    alpha_max: float = 512.0
    seed: int = 0
    init_scheme: str = "affine_ls"
    init_noise: float = 1e-2
    validation_fraction: float = 0.1
    restarts: int = 1
    ridge: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.restarts < 1:
            raise ValidationError("epochs, batch_size and restarts must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if not (0.0 <= self.validation_fraction <= 0.5):
            raise ValidationError("validation_fraction must be in [0, 0.5]")
        if self.alpha_start <= 0 or self.alpha_growth < 1.0 \
                or self.alpha_max < self.alpha_start:
            raise ValidationError("alpha schedule must satisfy "
                                  "0 < alpha_start <= alpha_max, growth >= 1")
        if self.init_scheme != "affine_ls":
            raise ValidationError(f"unknown init scheme {self.init_scheme!r}")


@dataclass
class TrainReport:
    n_train: int
    n_val: int
    epochs_run: int
    final_alpha: float
    loss_history: list = field(repr=False, default_factory=list)
    soft_rmse: float = np.nan           # soft forward pass, training split
    train_rmse: float = np.nan          # hardened tree, training split
    val_rmse: float = np.nan            # hardened tree, validation split
    harden_delta: float = np.nan        # train_rmse - soft_rmse
    empty_leaves: int = 0
    restart_index: int = 0
    wall_seconds: float = 0.0

    def to_dict(self):
        out = {}
        for k in ("n_train", "n_val", "epochs_run", "empty_leaves",
                  "restart_index"):
            out[k] = int(getattr(self, k))
        for k in ("final_alpha", "soft_rmse", "train_rmse", "val_rmse",
                  "harden_delta", "wall_seconds"):
            out[k] = float(getattr(self, k))
        out["loss_history"] = [float(v) for v in self.loss_history]
        return out


def rmse(pred, target):
    """Root mean squared error over all entries."""
    diff = np.asarray(pred) - np.asarray(target)
    return float(np.sqrt(np.mean(diff * diff)))


def init_params(data, depth, rng, noise=1e-2, alpha=1.0) -> SoftTreeParams:
    """Global affine least-squares fit in every leaf plus small noise;
    split vectors ~ N(0, 1/sqrt(n)), offsets centered on the data mean."""
    X, U = _as_xy(data)
    S, n = X.shape
    m = U.shape[1]
    B, L = 2 ** depth - 1, 2 ** depth

    Phi = np.hstack([X, np.ones((S, 1))])
    theta, *_ = np.linalg.lstsq(Phi, U, rcond=None)
    c0, d0 = theta[:n], theta[n]

    a = rng.standard_normal((B, n)) / np.sqrt(n)
    xbar = X.mean(axis=0)
    b = a @ xbar
    c = c0[None, :, :] + noise * rng.standard_normal((L, n, m))
    d = d0[None, :] + noise * rng.standard_normal((L, m))
    return SoftTreeParams(depth=depth, a=a, b=b,
                          c=np.ascontiguousarray(c),
                          d=np.ascontiguousarray(d), alpha=alpha)


def leaf_weights(params: SoftTreeParams, X):
    """Soft routing weights, one probability row per sample."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    nodes, dirs = leaf_paths(params.depth)
    return _accel.leaf_weights_batch(params.a, params.b, params.alpha,
                                     X, nodes, dirs)


def soft_forward(params: SoftTreeParams, X):
    """Weight-blended prediction at the params' sharpness."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.ascontiguousarray(np.atleast_2d(X))
    nodes, dirs = leaf_paths(params.depth)
    out = _accel.soft_forward_batch(params.a, params.b, params.c, params.d,
                                    params.alpha, X, nodes, dirs)
    return out[0] if single else out


def loss(params: SoftTreeParams, batch) -> float:
    X, U = _as_xy(batch)
    nodes, dirs = leaf_paths(params.depth)
    value, *_ = _accel.soft_loss_grad(params.a, params.b, params.c, params.d,
                                      params.alpha, X, U, nodes, dirs)
    return float(value)


def grad(params: SoftTreeParams, batch):
    """Exact gradients of `loss` with respect to (a, b, c, d)."""
    X, U = _as_xy(batch)
    nodes, dirs = leaf_paths(params.depth)
    _, ga, gb, gc, gd = _accel.soft_loss_grad(params.a, params.b, params.c,
                                              params.d, params.alpha, X, U,
                                              nodes, dirs)
    return ga, gb, gc, gd


def _fill_empty_leaves(has_data, c, d, depth):
    """Mirror-copy laws into empty subtrees from their populated sibling."""
    L = 2 ** depth

    def subtree_has_data(first, width):
        return bool(np.any(has_data[first:first + width]))

    def fix(heap, level):
        if level == depth:
            return
        width = 1 << (depth - level - 1)
        lfirst = (2 * heap << (depth - level - 1)) - L
        rfirst = lfirst + width
        l_has = subtree_has_data(lfirst, width)
        r_has = subtree_has_data(rfirst, width)
        if l_has and r_has:
            fix(2 * heap, level + 1)
            fix(2 * heap + 1, level + 1)
        elif l_has:
            fix(2 * heap, level + 1)
            c[rfirst:rfirst + width] = c[lfirst:lfirst + width]
            d[rfirst:rfirst + width] = d[lfirst:lfirst + width]
        elif r_has:
            fix(2 * heap + 1, level + 1)
            c[lfirst:lfirst + width] = c[rfirst:rfirst + width]
            d[lfirst:lfirst + width] = d[rfirst:rfirst + width]
        # both sides empty only happens when the parent saw no data at all,
        # which the caller rules out

    fix(1, 0)


def _harden_arrays(params: SoftTreeParams, X, U, ridge):
    """Hard-route, refit leaves, fill empty ones; returns (tree, n_empty)."""
    n = params.n
    L = 2 ** params.depth

    leaf_of = params.as_tree().leaf_array_batch(X)
    c = params.c.copy()
    d = params.d.copy()
    has_data = np.zeros(L, dtype=bool)
    for leaf in range(L):
        rows = np.flatnonzero(leaf_of == leaf)
        if rows.size == 0:
            continue
        has_data[leaf] = True
        Phi = np.hstack([X[rows], np.ones((rows.size, 1))])
        gram = Phi.T @ Phi + ridge * np.eye(n + 1)
        theta = np.linalg.solve(gram, Phi.T @ U[rows])
        c[leaf] = theta[:n]
        d[leaf] = theta[n]

    n_empty = int(L - has_data.sum())
    if n_empty:
        _fill_empty_leaves(has_data, c, d, params.depth)
    tree = ObliqueTree(depth=params.depth, branch_a=params.a.copy(),
                       branch_b=params.b.copy(), leaf_c=c, leaf_d=d)
    return tree, n_empty


def harden(params: SoftTreeParams, data, ridge=1e-8) -> ObliqueTree:
    """Freeze the splits and refit each leaf on its hard-routed samples.

    Leaf refits solve (Phi'Phi + ridge*I) theta = Phi'U on the leaf's rows
    (Phi carries an intercept column; the ridge keeps leaves with fewer than
    n+1 samples solvable). Leaves that receive no samples take the laws of
    their populated sibling subtree, position for position, so predictions
    stay total.
    """
    X, U = _as_xy(data)
    if X.shape[0] == 0:
        raise ValidationError("cannot harden on an empty dataset")
    tree, _ = _harden_arrays(params, X, U, ridge)
    return tree


def _adam_step(param, g, mom, vel, t, cfg: TrainConfig):
    mom *= cfg.beta1
    mom += (1.0 - cfg.beta1) * g
    vel *= cfg.beta2
    vel += (1.0 - cfg.beta2) * g * g
    mhat = mom / (1.0 - cfg.beta1 ** t)
    vhat = vel / (1.0 - cfg.beta2 ** t)
    param -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def _run_restart(Xtr, Utr, depth, cfg: TrainConfig, restart):
    rng = np.random.default_rng([cfg.seed, _RESTART_STREAM, restart])
    params = init_params((Xtr, Utr), depth, rng, noise=cfg.init_noise,
                         alpha=cfg.alpha_start)
    nodes, dirs = leaf_paths(depth)

    arrays = (params.a, params.b, params.c, params.d)
    moms = [np.zeros_like(arr) for arr in arrays]
    vels = [np.zeros_like(arr) for arr in arrays]

    S = Xtr.shape[0]
    history = []
    t = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(S)
        epoch_loss = 0.0
        for start in range(0, S, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            Xb = np.ascontiguousarray(Xtr[idx])
            Ub = np.ascontiguousarray(Utr[idx])
            value, ga, gb, gc, gd = _accel.soft_loss_grad(
                params.a, params.b, params.c, params.d, params.alpha,
                Xb, Ub, nodes, dirs)
            if not np.isfinite(value):
                raise Diverged(f"loss became non-finite in epoch {epoch}")
            epoch_loss += value
            # batch-mean gradient so the step size is batch-size invariant
            scale = 1.0 / idx.size
            t += 1
            _adam_step(params.a, ga * scale, moms[0], vels[0], t, cfg)
            _adam_step(params.b, gb * scale, moms[1], vels[1], t, cfg)
            _adam_step(params.c, gc * scale, moms[2], vels[2], t, cfg)
            _adam_step(params.d, gd * scale, moms[3], vels[3], t, cfg)
        history.append(epoch_loss / S)
        params.alpha = min(params.alpha * cfg.alpha_growth, cfg.alpha_max)
    return params, history


def train(data, depth, cfg: TrainConfig | None = None):
    """Fit, anneal and harden; returns (ObliqueTree, TrainReport).

    Deterministic for fixed (data, depth, config): the split and every
    restart use seed-derived generators and kernel reductions run in a
    fixed order. With restarts > 1 the model with the best validation RMSE
    (training RMSE when validation_fraction = 0) is kept.
    """
    cfg = cfg or TrainConfig()
    X, U = _as_xy(data)
    S = X.shape[0]
    if depth < 0:
        raise ValidationError("depth must be >= 0")
    if S < 2 ** depth:
        raise ValidationError(f"need at least {2 ** depth} samples "
                              f"for a depth-{depth} tree, got {S}")
    t0 = time.perf_counter()

    split_rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM])
    perm = split_rng.permutation(S)
    n_val = min(int(round(S * cfg.validation_fraction)), S - 1)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Xtr, Utr = np.ascontiguousarray(X[tr_idx]), np.ascontiguousarray(U[tr_idx])
    Xva, Uva = np.ascontiguousarray(X[val_idx]), np.ascontiguousarray(U[val_idx])

    best = None
    for r in range(cfg.restarts):
        params, history = _run_restart(Xtr, Utr, depth, cfg, r)
        tree, n_empty = _harden_arrays(params, Xtr, Utr, cfg.ridge)
        train_rmse = rmse(tree.predict_batch(Xtr), Utr)
        val_rmse = rmse(tree.predict_batch(Xva), Uva) if n_val else np.nan
        score = val_rmse if n_val else train_rmse
        if best is None or score < best[0]:
            best = (score, r, params, history, tree, n_empty,
                    train_rmse, val_rmse)

    _, r_best, params, history, tree, n_empty, train_rmse, val_rmse = best
    soft_rmse = rmse(soft_forward(params, Xtr), Utr)

    report = TrainReport(
        n_train=Xtr.shape[0], n_val=n_val, epochs_run=cfg.epochs,
        final_alpha=float(params.alpha), loss_history=history,
        soft_rmse=soft_rmse, train_rmse=train_rmse, val_rmse=val_rmse,
        harden_delta=train_rmse - soft_rmse, empty_leaves=n_empty,
        restart_index=r_best, wall_seconds=time.perf_counter() - t0)
    return tree, report
