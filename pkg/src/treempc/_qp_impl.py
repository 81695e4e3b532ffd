"""Primal active-set solver for box-constrained strictly convex QPs.

minimize    z' H z + q' z
subject to  lb <= z <= ub        (entries may be +-inf)

with H symmetric positive definite. The working set is the set of variables
pinned at a bound; the free-variable subproblem solves against a principal
submatrix of H, which is positive definite by construction, so every linear
solve along the way is nonsingular.

Written against the numba-supported numpy subset: the same source is compiled
with @njit on the default backend and executed as plain python on the numpy
fallback backend.
"""

import numpy as np

QP_OPTIMAL = 0
QP_MAX_ITER = 1


def qp_box_active_set(H, q, lb, ub, z0, active0, tol, max_iter):
    """Solve the box QP from a warm point.

    z0 is the starting point and active0 the starting working set
    (-1 pinned at lower bound, +1 at upper, 0 free); pass zeros for a cold
    start. Returns (z, active, status, iterations, kkt_residual) where the
    residual covers free-gradient stationarity and multiplier sign.
    """
    d = H.shape[0]
    z = z0.copy()
    active = active0.copy()

    # Sanitize the warm data: bounds that are infinite cannot be active, and
    # pinned coordinates must sit exactly on their bound.
    for i in range(d):
        if active[i] == -1 and not np.isfinite(lb[i]):
            active[i] = 0
        if active[i] == 1 and not np.isfinite(ub[i]):
            active[i] = 0
        if active[i] == -1:
            z[i] = lb[i]
        elif active[i] == 1:
            z[i] = ub[i]
        else:
            if z[i] < lb[i]:
                z[i] = lb[i]
            elif z[i] > ub[i]:
                z[i] = ub[i]

    idx = np.empty(d, dtype=np.int64)
    for it in range(1, max_iter + 1):
        nf = 0
        for i in range(d):
            if active[i] == 0:
                idx[nf] = i
                nf += 1

        # Minimizer over the free coordinates with the pinned ones fixed:
        # 2 H_FF z_F = -(q_F + 2 H_FA z_A).
        zf = np.empty(nf)
        if nf > 0:
            Hff = np.empty((nf, nf))
            rhs = np.empty(nf)
            for a_ in range(nf):
                i = idx[a_]
                acc = 0.5 * q[i]
                for j in range(d):
                    if active[j] != 0:
                        acc += H[i, j] * z[j]
                rhs[a_] = -acc
                for b_ in range(nf):
                    Hff[a_, b_] = H[i, idx[b_]]
            zf = np.linalg.solve(Hff, rhs)

        # Largest step toward the subproblem minimizer that stays in the box.
        alpha = 1.0
        blk = -1
        side = 0
        for a_ in range(nf):
            i = idx[a_]
            delta = zf[a_] - z[i]
            if delta > 0.0 and zf[a_] > ub[i]:
                step = (ub[i] - z[i]) / delta
                if step < alpha:
                    alpha = step
                    blk = i
                    side = 1
            elif delta < 0.0 and zf[a_] < lb[i]:
                step = (lb[i] - z[i]) / delta
                if step < alpha:
                    alpha = step
                    blk = i
                    side = -1

        if blk >= 0:
            for a_ in range(nf):
                i = idx[a_]
                z[i] = z[i] + alpha * (zf[a_] - z[i])
            if side == 1:
                z[blk] = ub[blk]
            else:
                z[blk] = lb[blk]
            active[blk] = side
            continue

        for a_ in range(nf):
            z[idx[a_]] = zf[a_]

        # Full step taken: check multiplier signs at the pinned coordinates.
        g = 2.0 * (H @ z) + q
        worst = -tol
        rel = -1
        for i in range(d):
            if active[i] == -1:
                lam = g[i]
            elif active[i] == 1:
                lam = -g[i]
            else:
                continue
            if lam < worst:
                worst = lam
                rel = i
        if rel < 0:
            res = 0.0
            for i in range(d):
                if active[i] == 0:
                    v = abs(g[i])
                else:
                    v = -g[i] if active[i] == -1 else g[i]
                    if v < 0.0:
                        v = 0.0
                if v > res:
                    res = v
            return z, active, QP_OPTIMAL, it, res
        active[rel] = 0

    return z, active, QP_MAX_ITER, max_iter, np.inf
