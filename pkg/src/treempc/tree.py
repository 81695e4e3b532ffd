"""Complete oblique binary trees with affine leaf laws.

Nodes use 1-based heap indexing: node t has children 2t and 2t+1, branch
nodes are 1..2^D - 1 and leaves 2^D..2^(D+1) - 1 for depth D. A branch
routes left when a_t' x <= b_t (ties left); a leaf predicts u = c_t' x + d_t
with c_t of shape (n, m).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import _accel
from .dataset import StateBox
from .errors import NotSeparable, ValidationError
from .explicit import chebyshev_radius

_ZERO_SPLIT = 1e-12


def leaf_paths(depth: int):
    """Per-leaf path tables: branch array index and direction per level.

    Returns (nodes, dirs), both (2^depth, depth) int64; dirs entry 0 means
    the path goes left at that level.
    """
    L = 2 ** depth
    nodes = np.zeros((L, depth), dtype=np.int64)
    dirs = np.zeros((L, depth), dtype=np.int64)
    for leaf in range(L):
        node = 1
        for k in range(depth):
            bit = (leaf >> (depth - 1 - k)) & 1
            nodes[leaf, k] = node - 1
            dirs[leaf, k] = bit
            node = 2 * node + bit
    return nodes, dirs


@dataclass(frozen=True)
class ObliqueTree:
    depth: int
    branch_a: np.ndarray   # (2^D - 1, n)
    branch_b: np.ndarray   # (2^D - 1,)
    leaf_c: np.ndarray     # (2^D, n, m)
    leaf_d: np.ndarray     # (2^D, m)

    def __post_init__(self):
        D = int(self.depth)
        if D < 0:
            raise ValidationError("depth must be >= 0")
        object.__setattr__(self, "depth", D)
        B, L = 2 ** D - 1, 2 ** D
        a = np.ascontiguousarray(self.branch_a, dtype=np.float64)
        b = np.ascontiguousarray(self.branch_b, dtype=np.float64).reshape(-1)
        c = np.ascontiguousarray(self.leaf_c, dtype=np.float64)
        d = np.ascontiguousarray(self.leaf_d, dtype=np.float64)
        if c.ndim != 3 or c.shape[0] != L:
            raise ValidationError(f"leaf_c must be ({L}, n, m)")
        n, m = c.shape[1], c.shape[2]
        if a.shape != (B, n) or b.shape != (B,):
            raise ValidationError(f"branch arrays must be ({B}, {n}) and ({B},)")
        if d.shape != (L, m):
            raise ValidationError(f"leaf_d must be ({L}, {m})")
        for arr, name in ((a, "branch_a"), (b, "branch_b"),
                          (c, "leaf_c"), (d, "leaf_d")):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries")
        object.__setattr__(self, "branch_a", a)
        object.__setattr__(self, "branch_b", b)
        object.__setattr__(self, "leaf_c", c)
        object.__setattr__(self, "leaf_d", d)

    @property
    def n(self) -> int:
        return self.leaf_c.shape[1]

    @property
    def m(self) -> int:
        return self.leaf_c.shape[2]

    @property
    def n_branches(self) -> int:
        return self.branch_a.shape[0]

    @property
    def n_leaves(self) -> int:
        return self.leaf_c.shape[0]

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.depth + 1) - 1

    def predict(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64).reshape(self.n)
        return _accel.tree_predict_one(self.branch_a, self.branch_b,
                                       self.leaf_c, self.leaf_d, self.depth, x)

    def predict_batch(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, self.n)
        return _accel.tree_predict_batch(self.branch_a, self.branch_b,
                                         self.leaf_c, self.leaf_d, self.depth, X)

    def leaf_array_batch(self, X):
        """0-based leaf array index per row."""
        X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, self.n)
        return _accel.tree_leaf_batch(self.branch_a, self.branch_b, self.depth, X)

    def leaf_index(self, x):
        """Heap id of the leaf reached by x plus the (node, went_left) path."""
        x = np.asarray(x, dtype=np.float64).reshape(self.n)
        node = 1
        path = []
        for _ in range(self.depth):
            left = bool(self.branch_a[node - 1] @ x <= self.branch_b[node - 1])
            path.append((node, left))
            node = 2 * node if left else 2 * node + 1
        return node, path

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "n": self.n,
            "m": self.m,
            "branches": [{"a": self.branch_a[i].tolist(),
                          "b": float(self.branch_b[i])}
                         for i in range(self.n_branches)],
            "leaves": [{"c": self.leaf_c[i].tolist(),
                        "d": self.leaf_d[i].tolist()}
                       for i in range(self.n_leaves)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ObliqueTree":
        try:
            D = int(data["depth"])
            n, m = int(data["n"]), int(data["m"])
            branches, leaves = data["branches"], data["leaves"]
        except KeyError as exc:
            raise ValidationError(f"tree definition missing field {exc}") from exc
        if len(branches) != 2 ** D - 1 or len(leaves) != 2 ** D:
            raise ValidationError("node counts do not match the stated depth")
        a = np.array([br["a"] for br in branches], dtype=np.float64).reshape(2 ** D - 1, n)
        b = np.array([br["b"] for br in branches], dtype=np.float64)
        c = np.array([lf["c"] for lf in leaves], dtype=np.float64).reshape(2 ** D, n, m)
        d = np.array([lf["d"] for lf in leaves], dtype=np.float64).reshape(2 ** D, m)
        return cls(depth=D, branch_a=a, branch_b=b, leaf_c=c, leaf_d=d)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ObliqueTree":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _lp_extent(a, rows, rhs, box, maximize):
    """Max (or min) of a'x over {rows x <= rhs} within the box."""
    c = -a if maximize else a
    res = linprog(c, A_ub=rows if len(rows) else None,
                  b_ub=rhs if len(rhs) else None,
                  bounds=list(zip(box.lo, box.hi)), method="highs")
    if not res.success:
        return None
    val = float(res.fun)
    return -val if maximize else val


class _Cell:
    """A region piece inside the recursion: original facets + applied cuts."""

    __slots__ = ("H", "l", "cuts_H", "cuts_l", "F", "g", "rid")

    def __init__(self, H, l, cuts_H, cuts_l, F, g, rid):
        self.H, self.l = H, l
        self.cuts_H, self.cuts_l = cuts_H, cuts_l
        self.F, self.g = F, g
        self.rid = rid

    def all_rows(self):
        if self.cuts_H:
            return (np.vstack([self.H] + self.cuts_H),
                    np.concatenate([self.l, np.array(self.cuts_l)]))
        return self.H, self.l


def tree_from_regions(regions, box: StateBox, min_radius=1e-9):
    """Compile a polyhedral partition into an equivalent oblique tree.

    Splits recursively on facet hyperplanes already stored in the regions,
    choosing at each node the facet that most evenly separates the current
    region set (straddled regions are clipped and continue on both sides,
    which cannot grow the count: a valid split strictly reduces it on both
    sides, else NotSeparable). The finished tree is padded to a complete
    tree by duplicating leaf laws below trivial always-left splits.
    """
    if not regions:
        raise ValidationError("no regions to compile")
    n = regions[0].F.shape[1]
    m = regions[0].F.shape[0]
    cells = [_Cell(r.H, r.l, [], [], r.F, r.g, i) for i, r in enumerate(regions)]

    def classify(cell, a, b):
        rows, rhs = cell.all_rows()
        hi = _lp_extent(a, rows, rhs, box, maximize=True)
        lo = _lp_extent(a, rows, rhs, box, maximize=False)
        if hi is None or lo is None:
            return "empty"
        if hi <= b + 1e-9:
            return "left"
        if lo >= b - 1e-9:
            return "right"
        return "straddle"

    def clip(cell, a, b, to_left):
        row = a if to_left else -a
        off = b if to_left else -b
        piece = _Cell(cell.H, cell.l, cell.cuts_H + [row.reshape(1, -1)],
                      cell.cuts_l + [off], cell.F, cell.g, cell.rid)
        rows, rhs = piece.all_rows()
        if chebyshev_radius(rows, rhs, box.lo, box.hi) < min_radius:
            return None
        return piece

    def build(items, depth_guard=0):
        if len(items) == 1:
            return ("leaf", items[0].F, items[0].g)
        if depth_guard > 4 * len(regions) + 8:
            raise NotSeparable("region compilation failed to terminate")

        candidates = []
        seen = set()
        for it in items:
            for r in range(it.H.shape[0]):
                a, b = it.H[r], float(it.l[r])
                lead = np.flatnonzero(np.abs(a) > _ZERO_SPLIT)
                if lead.size == 0:
                    continue
                sgn = 1.0 if a[lead[0]] > 0 else -1.0
                key = tuple(np.round(np.concatenate([sgn * a, [sgn * b]]), 9))
                if key in seen:
                    continue
                seen.add(key)
                candidates.append((a.copy(), b))

        best = None
        for a, b in candidates:
            sides = [classify(it, a, b) for it in items]
            left, right = [], []
            ok = True
            for it, side in zip(items, sides):
                if side == "left":
                    left.append(it)
                elif side == "right":
                    right.append(it)
                elif side == "straddle":
                    pl = clip(it, a, b, to_left=True)
                    pr = clip(it, a, b, to_left=False)
                    if pl is not None:
                        left.append(pl)
                    if pr is not None:
                        right.append(pr)
                # "empty" pieces drop out
            if not left or not right:
                ok = False
            if len(left) >= len(items) or len(right) >= len(items):
                ok = False
            if not ok:
                continue
            score = max(len(left), len(right))
            if best is None or score < best[0]:
                best = (score, a, b, left, right)
        if best is None:
            raise NotSeparable(
                f"no stored facet separates the {len(items)} regions")
        _, a, b, left, right = best
        return ("branch", a, b,
                build(left, depth_guard + 1), build(right, depth_guard + 1))

    root = build(cells)

    def node_depth(node):
        if node[0] == "leaf":
            return 0
        return 1 + max(node_depth(node[3]), node_depth(node[4]))

    D = node_depth(root)
    B, L = 2 ** D - 1, 2 ** D
    branch_a = np.zeros((B, n))
    branch_b = np.zeros(B)
    leaf_c = np.zeros((L, n, m))
    leaf_d = np.zeros((L, m))

    def fill(node, heap, level):
        if node[0] == "leaf":
            F, g = node[1], node[2]
            first = (heap << (D - level)) - 2 ** D
            for leaf in range(first, first + (1 << (D - level))):
                leaf_c[leaf] = F.T
                leaf_d[leaf] = g
            # padded branches below keep a = 0, b = 0 (always-left ties)
            return
        _, a, b, lchild, rchild = node
        branch_a[heap - 1] = a
        branch_b[heap - 1] = b
        fill(lchild, 2 * heap, level + 1)
        fill(rchild, 2 * heap + 1, level + 1)

    fill(root, 1, 0)
    return ObliqueTree(depth=D, branch_a=branch_a, branch_b=branch_b,
                       leaf_c=leaf_c, leaf_d=leaf_d)


def lipschitz_max(tree: ObliqueTree, tol=1e-10, max_iter=1000):
    """Largest leaf-law gain: max_t ||c_t||_2 via power iteration."""
    worst = 0.0
    for leaf in range(tree.n_leaves):
        c = tree.leaf_c[leaf]
        if not np.any(c):
            continue
        M = c.T @ c if tree.m <= tree.n else c @ c.T
        dim = M.shape[0]
        v = 1.0 + 0.01 * np.arange(dim)
        v /= np.linalg.norm(v)
        lam_prev = 0.0
        lam = 0.0
        for _ in range(max_iter):
            w = M @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                lam = 0.0
                break
            v = w / nw
            lam = float(v @ M @ v)
            if abs(lam - lam_prev) <= tol * max(abs(lam), 1.0):
                break
            lam_prev = lam
        worst = max(worst, np.sqrt(max(lam, 0.0)))
    return float(worst)


def _subtree_leaf_range(heap, level, depth):
    width = 1 << (depth - level)
    first = (heap << (depth - level)) - (1 << depth)
    return first, first + width


def _heap_level(heap):
    return heap.bit_length() - 1


def estimate_max_jump(tree: ObliqueTree, box: StateBox,
                      samples_per_facet=256, seed=0, eps=1e-9,
                      mode="sample"):
    """Largest law discontinuity across branch hyperplanes inside the box.

    sample mode draws points on each facet (uniform box draws projected onto
    the hyperplane, kept when they land back inside the box), routes x +-
    eps * unit-normal and takes the worst difference of the two reached leaf
    laws evaluated at the facet point. A Monte-Carlo lower estimate.

    exact mode (single-output trees of depth <= 4) solves, per facet and per
    reachable leaf pair, two LPs maximizing the signed law difference over
    the facet polytope; exact but combinatorial.

    Zero split vectors (padding) are skipped with a warning.
    """
    if mode not in ("sample", "exact"):
        raise ValidationError(f"unknown jump mode {mode!r}")
    if mode == "exact":
        if tree.m != 1:
            raise ValidationError("exact jump mode requires a single output")
        if tree.depth > 4:
            raise ValidationError("exact jump mode is limited to depth <= 4")
        return _exact_max_jump(tree, box)

    rng = np.random.default_rng(seed)
    worst = 0.0
    degenerate = 0
    for j in range(tree.n_branches):
        a = tree.branch_a[j]
        nrm = float(np.linalg.norm(a))
        if nrm < _ZERO_SPLIT:
            degenerate += 1
            continue
        ahat = a / nrm
        bhat = float(tree.branch_b[j]) / nrm
        collected = 0
        attempts = 0
        while collected < samples_per_facet and attempts < 64:
            attempts += 1
            draw = box.sample(4 * samples_per_facet, rng)
            proj = draw - np.outer(draw @ ahat - bhat, ahat)
            keep = box.contains_rows(proj, tol=1e-12)
            pts = proj[keep]
            if pts.shape[0] == 0:
                continue
            take = min(pts.shape[0], samples_per_facet - collected)
            pts = pts[:take]
            collected += take
            lo_leaf = tree.leaf_array_batch(pts - eps * ahat)
            hi_leaf = tree.leaf_array_batch(pts + eps * ahat)
            for p, ll, hl in zip(pts, lo_leaf, hi_leaf):
                if ll == hl:
                    continue
                du = (tree.leaf_c[hl] - tree.leaf_c[ll]).T @ p \
                    + (tree.leaf_d[hl] - tree.leaf_d[ll])
                worst = max(worst, float(np.linalg.norm(du)))
    if degenerate:
        warnings.warn(f"skipped {degenerate} degenerate (zero-vector) splits",
                      stacklevel=2)
    return worst


def _path_rows(tree, heap_from, heap_to):
    """Inequality rows of the routing path from node heap_from down to
    heap_to (exclusive of heap_from's own split)."""
    chain = []
    node = heap_to
    while node > heap_from:
        parent = node // 2
        chain.append((parent, node == 2 * parent))
        node = parent
    rows, rhs = [], []
    for parent, went_left in reversed(chain):
        a = tree.branch_a[parent - 1]
        b = float(tree.branch_b[parent - 1])
        if np.linalg.norm(a) < _ZERO_SPLIT:
            continue
        if went_left:
            rows.append(a)
            rhs.append(b)
        else:
            rows.append(-a)
            rhs.append(-b)
    return rows, rhs


def _exact_max_jump(tree: ObliqueTree, box: StateBox):
    D = tree.depth
    worst = 0.0
    degenerate = 0
    for j in range(tree.n_branches):
        heap = j + 1
        a = tree.branch_a[j]
        b = float(tree.branch_b[j])
        if np.linalg.norm(a) < _ZERO_SPLIT:
            degenerate += 1
            continue
        level = _heap_level(heap)
        anc_rows, anc_rhs = _path_rows(tree, 1, heap)
        lo_l, hi_l = _subtree_leaf_range(2 * heap, level + 1, D)
        lo_r, hi_r = _subtree_leaf_range(2 * heap + 1, level + 1, D)
        for lf in range(lo_l, hi_l):
            rows_l, rhs_l = _path_rows(tree, heap, lf + 2 ** D)
            for rf in range(lo_r, hi_r):
                dc = (tree.leaf_c[rf] - tree.leaf_c[lf])[:, 0]
                dd = float(tree.leaf_d[rf, 0] - tree.leaf_d[lf, 0])
                if not np.any(np.abs(dc) > 0) and dd == 0.0:
                    continue
                rows_r, rhs_r = _path_rows(tree, heap, rf + 2 ** D)
                A_ub = rows_l + rows_r + anc_rows
                b_ub = rhs_l + rhs_r + anc_rhs
                for sign in (1.0, -1.0):
                    res = linprog(-sign * dc,
                                  A_ub=np.array(A_ub) if A_ub else None,
                                  b_ub=np.array(b_ub) if b_ub else None,
                                  A_eq=a.reshape(1, -1), b_eq=[b],
                                  bounds=list(zip(box.lo, box.hi)),
                                  method="highs")
                    if res.success:
                        worst = max(worst, -res.fun + sign * dd)
    if degenerate:
        warnings.warn(f"skipped {degenerate} degenerate (zero-vector) splits",
                      stacklevel=2)
    return worst


def export_rules(tree: ObliqueTree, feature_names=None, precision=6):
    """Nested if/else rendering of the tree; splits also shown unit-normalized."""
    names = list(feature_names) if feature_names else \
        [f"x{i+1}" for i in range(tree.n)]
    if len(names) != tree.n:
        raise ValidationError(f"need {tree.n} feature names, got {len(names)}")

    def affine(coef, offset):
        parts = []
        for k, name in enumerate(names):
            v = coef[k]
            if v == 0.0:
                continue
            sign = "-" if v < 0 else ("+" if parts else "")
            lead = f"{sign} " if parts else sign
            parts.append(f"{lead}{abs(v):.{precision}g}*{name}")
        if offset != 0.0 or not parts:
            sign = "-" if offset < 0 else ("+" if parts else "")
            lead = f"{sign} " if parts else sign
            parts.append(f"{lead}{abs(offset):.{precision}g}")
        return " ".join(parts)

    lines = []

    def walk(heap, level, indent):
        pad = "    " * indent
        if level == tree.depth:
            leaf = heap - 2 ** tree.depth
            for col in range(tree.m):
                expr = affine(tree.leaf_c[leaf, :, col], tree.leaf_d[leaf, col])
                lines.append(f"{pad}u{col+1} = {expr}")
            return
        a = tree.branch_a[heap - 1]
        b = float(tree.branch_b[heap - 1])
        nrm = float(np.linalg.norm(a))
        cond = f"{affine(a, 0.0)} <= {b:.{precision}g}"
        if nrm > _ZERO_SPLIT:
            unit = f"  [unit: {affine(a / nrm, 0.0)} <= {b / nrm:.{precision}g}]"
        else:
            unit = "  [degenerate split: always left]"
        lines.append(f"{pad}if {cond}:{unit}")
        walk(2 * heap, level + 1, indent + 1)
        lines.append(f"{pad}else:")
        walk(2 * heap + 1, level + 1, indent + 1)

    walk(1, 0, 0)
    return "\n".join(lines) + "\n"
