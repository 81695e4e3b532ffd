"""Exact piecewise-affine form of the constrained MPC law.

For input-bound-only problems the optimizer of the condensed QP is piecewise
affine in the state: every combination of input components pinned at a bound
(at-lower / free / at-upper) yields a candidate affine law z(x) = K x + k
from the KKT conditions, valid on the polyhedron where the free components
stay inside their bounds and the pinned multipliers stay nonnegative.
Enumerating the 3^(N*m) combinations and discarding empty or lower-
dimensional candidates gives one cell per optimal active set. Adjacent cells
whose FIRST input move follows the same affine law are then merged whenever
their union is again a polyhedron (envelope test), so the returned regions
are maximal pieces of the control law itself. This module is the exactness
oracle the tree pipeline is checked against, so it is kept independent of
the iterative solver.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import NotCovered, TooLarge, ValidationError
from .qp import CondensedQp, condense
from .system import BUILTIN_BOXES, MpcProblem

_ZERO_ROW = 1e-12
_GEOM_TOL = 1e-9


@dataclass(frozen=True)
class RegionLaw:
    """One polyhedral piece {x : H x <= l} with first-move law u = F x + g.

    Rows of H are unit 2-norm. The box used for the dimensionality check is
    not part of H, so regions may extend past it.
    """

    H: np.ndarray
    l: np.ndarray
    F: np.ndarray
    g: np.ndarray
    active_set: tuple
    chebyshev_radius: float

    def contains(self, x, tol=_GEOM_TOL):
        if self.H.shape[0] == 0:
            return True
        return bool(np.all(self.H @ x <= self.l + tol))


def _normalize_rows(rows, rhs):
    """Unit-normalize inequality rows; returns None when provably empty."""
    out_rows, out_rhs = [], []
    for row, r in zip(rows, rhs):
        nrm = float(np.linalg.norm(row))
        if nrm < _ZERO_ROW:
            if r < -_GEOM_TOL:
                return None  # 0 <= negative: empty set
            continue
        out_rows.append(row / nrm)
        out_rhs.append(r / nrm)
    n = rows.shape[1] if hasattr(rows, "shape") else len(rows[0])
    if not out_rows:
        return np.zeros((0, n)), np.zeros(0)
    return np.array(out_rows), np.array(out_rhs)


def chebyshev_radius(H, l, box_lo, box_hi):
    """Radius of the largest ball in {Hx <= l} intersected with the box.

    Returns -inf when the intersection is empty. Rows of H must be unit norm.
    """
    n = len(box_lo)
    rows = [np.concatenate([H[i], [1.0]]) for i in range(H.shape[0])]
    rhs = list(l)
    for j in range(n):
        e = np.zeros(n + 1)
        e[j] = 1.0
        e[-1] = 1.0
        rows.append(e.copy())
        rhs.append(box_hi[j])
        e[j] = -1.0
        rows.append(e)
        rhs.append(-box_lo[j])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs),
                  bounds=[(None, None)] * n + [(0.0, None)], method="highs")
    if not res.success or res.x is None:
        return -np.inf
    return float(res.x[-1])


def _support_max(H, l, a):
    """sup of a'x over {H x <= l}; +inf when unbounded in that direction."""
    res = linprog(-a, A_ub=H, b_ub=l, bounds=[(None, None)] * H.shape[1],
                  method="highs")
    if res.status == 3:
        return np.inf
    if not res.success or res.x is None:
        return -np.inf
    return float(-res.fun)


def _dedupe_rows(rows, rhs):
    out_rows, out_rhs, seen = [], [], set()
    for a, b in zip(rows, rhs):
        key = (tuple(np.round(a, 9)), round(float(b), 9))
        if key in seen:
            continue
        seen.add(key)
        out_rows.append(a)
        out_rhs.append(b)
    n = len(rows[0]) if out_rows else 0
    return np.array(out_rows).reshape(len(out_rows), n), np.array(out_rhs)


def _box_rows(box_lo, box_hi):
    n = len(box_lo)
    eye = np.eye(n)
    return np.vstack([eye, -eye]), np.concatenate([box_hi, -box_lo])


def _try_union(Hp, lp, Hq, lq, box_lo, box_hi, tol=1e-7):
    """H-rep of (P union Q) clipped to the box when that union is convex
    there, else None.

    Envelope construction: keep the rows of each polyhedron that are valid
    for the other; the union is convex exactly when no point of the envelope
    violates one dropped row of P and one of Q simultaneously (checked by a
    feasibility LP per dropped-row pair). All tests run on the box-clipped
    polyhedra: the cells partition the exploration box, and near-parallel
    sliver cells can fail the unclipped test at points far outside it.
    """
    Hb, lb = _box_rows(box_lo, box_hi)
    Hpc, lpc = np.vstack([Hp, Hb]), np.concatenate([lp, lb])
    Hqc, lqc = np.vstack([Hq, Hb]), np.concatenate([lq, lb])
    valid_p = [i for i in range(Hp.shape[0])
               if _support_max(Hqc, lqc, Hp[i]) <= lp[i] + tol]
    valid_q = [j for j in range(Hq.shape[0])
               if _support_max(Hpc, lpc, Hq[j]) <= lq[j] + tol]
    if len(valid_p) == Hp.shape[0]:
        return Hp, lp   # Q (within the box) inside P
    if len(valid_q) == Hq.shape[0]:
        return Hq, lq
    inv_p = [i for i in range(Hp.shape[0]) if i not in valid_p]
    inv_q = [j for j in range(Hq.shape[0]) if j not in valid_q]

    rows = [Hp[i] for i in valid_p] + [Hq[j] for j in valid_q]
    rhs = [lp[i] for i in valid_p] + [lq[j] for j in valid_q]
    He, le = _dedupe_rows(rows, rhs) if rows else (np.zeros((0, Hp.shape[1])),
                                                   np.zeros(0))
    n = Hp.shape[1]
    for i in inv_p:
        for j in inv_q:
            A = np.vstack([He, Hb, -Hp[i:i + 1], -Hq[j:j + 1]])
            b = np.concatenate([le, lb, [-(lp[i] + tol)], [-(lq[j] + tol)]])
            res = linprog(np.zeros(n), A_ub=A, b_ub=b,
                          bounds=[(None, None)] * n, method="highs")
            if res.success:
                return None   # envelope point outside both: union not convex
    return He, le


def _consensus_active(sets):
    first = sets[0]
    return tuple(v if all(s[i] == v for s in sets) else None
                 for i, v in enumerate(first))


def _merge_equal_laws(cells, box_lo, box_hi):
    """Fuse cells with identical first-move laws into maximal polyhedra."""
    groups, order = {}, []
    for reg in cells:
        key = (tuple(np.round(reg.F, 9).ravel()),
               tuple(np.round(reg.g, 9).ravel()))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(reg)

    merged = []
    for key in order:
        group = groups[key]
        items = [(r.H, r.l, [r.active_set]) for r in group]
        changed = True
        while changed and len(items) > 1:
            changed = False
            for i in range(len(items)):
                for j in range(i + 1, len(items)):
                    got = _try_union(items[i][0], items[i][1],
                                     items[j][0], items[j][1],
                                     box_lo, box_hi)
                    if got is not None:
                        items[i] = (got[0], got[1],
                                    items[i][2] + items[j][2])
                        del items[j]
                        changed = True
                        break
                if changed:
                    break
        for H, l, sets in items:
            merged.append(RegionLaw(
                H=H, l=l, F=group[0].F, g=group[0].g,
                active_set=_consensus_active(sets),
                chebyshev_radius=chebyshev_radius(H, l, box_lo, box_hi)))
    return merged


def enumerate_explicit(problem: MpcProblem, box=None, max_vars=12,
                       min_radius=_GEOM_TOL):
    """All full-dimensional regions of the first-move MPC law inside a box.

    Requires all state bounds infinite (input-only constraint structure) and
    N*m <= max_vars (the sweep is 3^(N*m) candidates). `box` is a (lo, hi)
    pair of per-axis arrays; defaults to the built-in sampling box for the
    named problems. Dimensionality is assessed within the box, so saturation
    regions that never meet it are dropped. Active-set cells that carry the
    same first-move law are merged when their union is convex, so the count
    reflects the pieces of the control law, not of the full-horizon
    optimizer.
    """
    if problem.has_state_bounds:
        raise ValidationError("explicit enumeration requires all state bounds infinite")
    d = problem.N * problem.m
    if d > max_vars:
        raise TooLarge(f"N*m = {d} exceeds enumeration cap {max_vars} "
                       f"(3^{d} candidate active sets)")
    if box is None:
        if problem.name not in BUILTIN_BOXES:
            raise ValidationError("a (lo, hi) box is required for custom problems")
        box = BUILTIN_BOXES[problem.name]
    box_lo = np.asarray(box[0], dtype=np.float64).reshape(problem.n)
    box_hi = np.asarray(box[1], dtype=np.float64).reshape(problem.n)

    qp = condense(problem)
    H, Ft = qp.H, qp.F.T  # Ft maps x0 to half the linear cost term
    lb, ub = qp.lb, qp.ub
    n = problem.n

    options = []
    for i in range(d):
        opt = [0]
        if np.isfinite(lb[i]):
            opt.append(-1)
        if np.isfinite(ub[i]):
            opt.append(1)
        options.append(opt)

    regions = []
    for combo in itertools.product(*options):
        sigma = np.array(combo, dtype=np.int8)
        free = np.where(sigma == 0)[0]
        pinned = np.where(sigma != 0)[0]

        K = np.zeros((d, n))
        k = np.zeros(d)
        for i in pinned:
            k[i] = ub[i] if sigma[i] > 0 else lb[i]
        if free.size:
            Hff = H[np.ix_(free, free)]
            rhs_const = -(H[np.ix_(free, pinned)] @ k[pinned]) if pinned.size else np.zeros(free.size)
            sol = np.linalg.solve(Hff, np.column_stack([rhs_const, -Ft[free]]))
            k[free] = sol[:, 0]
            K[free] = sol[:, 1:]

        # gradient of the cost at the candidate law: affine in x
        Lg = 2.0 * (H @ K + Ft)
        g0 = 2.0 * (H @ k)

        rows, rhs = [], []
        for i in pinned:
            if sigma[i] > 0:
                # multiplier of z_i <= ub_i is -grad_i, must be >= 0
                rows.append(Lg[i])
                rhs.append(-g0[i])
            else:
                rows.append(-Lg[i])
                rhs.append(g0[i])
        for i in free:
            if np.isfinite(ub[i]):
                rows.append(K[i])
                rhs.append(ub[i] - k[i])
            if np.isfinite(lb[i]):
                rows.append(-K[i])
                rhs.append(k[i] - lb[i])

        if rows:
            norm = _normalize_rows(np.array(rows), np.array(rhs))
            if norm is None:
                continue
            Hr, lr = norm
        else:
            Hr, lr = np.zeros((0, n)), np.zeros(0)

        radius = chebyshev_radius(Hr, lr, box_lo, box_hi)
        if radius < min_radius:
            continue
        regions.append(RegionLaw(
            H=Hr, l=lr,
            F=K[:problem.m].copy(), g=k[:problem.m].copy(),
            active_set=tuple(int(s) for s in sigma),
            chebyshev_radius=radius))

    return _merge_equal_laws(regions, box_lo, box_hi)


def eval_explicit(regions, x, tol=_GEOM_TOL):
    """Law of the first region containing x; NotCovered when none does."""
    x = np.asarray(x, dtype=np.float64)
    for reg in regions:
        if reg.contains(x, tol):
            return reg.F @ x + reg.g
    raise NotCovered(f"state {x} lies outside all {len(regions)} regions")


def regions_to_dicts(regions):
    return [{
        "H": reg.H.tolist(),
        "l": reg.l.tolist(),
        "F": reg.F.tolist(),
        "g": reg.g.tolist(),
        "active_set": list(reg.active_set),
        "chebyshev_radius": reg.chebyshev_radius,
    } for reg in regions]


def regions_from_dicts(data):
    out = []
    for item in data:
        H = np.asarray(item["H"], dtype=np.float64)
        out.append(RegionLaw(
            H=H, l=np.asarray(item["l"], dtype=np.float64),
            F=np.asarray(item["F"], dtype=np.float64),
            g=np.asarray(item["g"], dtype=np.float64),
            active_set=tuple(item["active_set"]),
            chebyshev_radius=float(item["chebyshev_radius"])))
    return out
