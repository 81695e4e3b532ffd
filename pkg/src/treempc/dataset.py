"""Sampling boxes, label generation and dataset serialization.

Datasets pair grid (or randomly drawn) states with the first optimal input
move of the MPC law at each state. Grid axes step from the lower corner in
exact multiples of the spacing; point ordering is row-major over the axes
(last axis fastest), and that ordering is preserved by subsampling and by
parallel label generation, so artifacts are byte-identical across --jobs.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import AllInfeasible, TooManyPoints, ValidationError
from .qp import STATUS_OPTIMAL, condense, solve_qp
from .system import MpcProblem

GRID_CAP_DEFAULT = 10_000_000
_MAGIC = "treempc.dsbin"


@dataclass(frozen=True)
class StateBox:
    """Axis-aligned sampling set {x : lo <= x <= hi}."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValidationError("box lo/hi must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("box bounds must be finite")
        if not np.all(lo < hi):
            raise ValidationError("box requires lo < hi on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n(self) -> int:
        return self.lo.shape[0]

    def contains(self, x, tol=0.0):
        x = np.asarray(x)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def contains_rows(self, X, tol=0.0):
        X = np.asarray(X)
        return np.all((X >= self.lo - tol) & (X <= self.hi + tol), axis=1)

    def scaled(self, factor: float) -> "StateBox":
        mid = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo) * factor
        return StateBox(mid - half, mid + half)

    def sample(self, count, seed):
        rng = np.random.default_rng(seed)
        return self.lo + rng.random((count, self.n)) * (self.hi - self.lo)


@dataclass(frozen=True)
class Dataset:
    """State/input pairs plus the sampling geometry they came from."""

    X: np.ndarray
    U: np.ndarray
    box: StateBox
    delta: float | None
    problem_name: str = "custom"
    seed: int | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        U = np.ascontiguousarray(self.U, dtype=np.float64)
        if X.ndim != 2 or U.ndim != 2 or X.shape[0] != U.shape[0]:
            raise ValidationError("X and U must be 2-D with matching row counts")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "U", U)

    def __len__(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[1]

    @property
    def m(self):
        return self.U.shape[1]


def grid_axis(lo, hi, delta):
    if delta <= 0:
        raise ValidationError("grid spacing must be positive")
    count = int(math.floor((hi - lo) / delta + 1e-9)) + 1
    return lo + np.arange(count) * delta


def lattice_shape(box: StateBox, delta: float):
    return np.array([grid_axis(box.lo[i], box.hi[i], delta).shape[0]
                     for i in range(box.n)], dtype=np.int64)


def grid_states(box: StateBox, delta: float, cap=GRID_CAP_DEFAULT):
    """Materialize the full grid, row-major over axes."""
    axes = [grid_axis(box.lo[i], box.hi[i], delta) for i in range(box.n)]
    total = int(np.prod([len(a) for a in axes], dtype=np.int64))
    if total > cap:
        raise TooManyPoints(f"grid would hold {total} points, cap is {cap}")
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.ascontiguousarray(
        np.stack(mesh, axis=-1).reshape(total, box.n))


def subsample(X, count, seed):
    """Seeded uniform subsample without replacement, original order kept."""
    X = np.asarray(X)
    if count > X.shape[0]:
        raise ValidationError(f"cannot draw {count} of {X.shape[0]} rows")
    rng = np.random.default_rng(seed)
    idx = rng.choice(X.shape[0], size=count, replace=False)
    idx.sort()
    return np.ascontiguousarray(X[idx])


def sample_lattice(box: StateBox, delta: float, count, seed):
    """Draw `count` distinct grid points without materializing the grid.

    Sequential-rejection draw of lattice indices (exactly a uniform
    without-replacement sample), then sorted so the result keeps the
    row-major grid order.
    """
    shape = lattice_shape(box, delta)
    total = int(np.prod(shape, dtype=np.int64))
    if count > total:
        raise ValidationError(f"cannot draw {count} of {total} grid points")
    rng = np.random.default_rng(seed)
    seen = set()
    picked = []
    while len(picked) < count:
        batch = rng.integers(0, total, size=max(1024, count - len(picked)))
        for v in batch:
            v = int(v)
            if v not in seen:
                seen.add(v)
                picked.append(v)
                if len(picked) == count:
                    break
    picked = np.array(sorted(picked), dtype=np.int64)
    coords = np.unravel_index(picked, tuple(shape))
    X = np.empty((count, box.n))
    for i in range(box.n):
        X[:, i] = box.lo[i] + coords[i] * delta
    return X


def random_states(box: StateBox, count, seed):
    return box.sample(count, seed)


def label_states(problem: MpcProblem, X, jobs=1, tol=1e-9):
    """First-move MPC labels for each state row.

    Solves are cold-started so the result is independent of the chunking;
    states whose QP fails are skipped with a warning. Returns (X_kept, U,
    n_skipped).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    qp = condense(problem)
    S = X.shape[0]

    def solve_chunk(chunk):
        out = np.empty((chunk.shape[0], problem.m))
        ok = np.empty(chunk.shape[0], dtype=bool)
        for i in range(chunk.shape[0]):
            sol = solve_qp(qp, chunk[i], tol=tol)
            good = sol.status == STATUS_OPTIMAL
            ok[i] = good
            out[i] = sol.u0 if good else np.nan
        return out, ok

    if jobs <= 1 or S < 64:
        U, ok = solve_chunk(X)
    else:
        n_chunks = min(jobs * 4, S)
        bounds = np.linspace(0, S, n_chunks + 1, dtype=int)
        chunks = [X[bounds[i]:bounds[i + 1]] for i in range(n_chunks)]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(solve_chunk, chunks))
        U = np.concatenate([p[0] for p in parts])
        ok = np.concatenate([p[1] for p in parts])

    n_skipped = int(S - ok.sum())
    if n_skipped == S:
        raise AllInfeasible("no sampled state produced a solvable QP")
    if n_skipped:
        warnings.warn(f"skipped {n_skipped} states with unsolvable QPs",
                      stacklevel=2)
    return np.ascontiguousarray(X[ok]), np.ascontiguousarray(U[ok]), n_skipped


def generate_dataset(problem: MpcProblem, box: StateBox, delta: float,
                     count=None, seed=0, jobs=1,
                     cap=GRID_CAP_DEFAULT) -> Dataset:
    """Grid the box, optionally subsample to `count` points, label with MPC.

    When the full lattice exceeds `cap` and a count is given, the subsample
    is drawn directly from lattice indices so the grid never materializes.
    """
    if box.n != problem.n:
        raise ValidationError(f"box is {box.n}-dimensional, problem has n = {problem.n}")
    shape = lattice_shape(box, delta)
    total = int(np.prod(shape, dtype=np.int64))
    if count is None:
        X = grid_states(box, delta, cap=cap)
    elif total <= cap:
        X = subsample(grid_states(box, delta, cap=cap), count, seed)
    else:
        X = sample_lattice(box, delta, count, seed)
    X, U, _ = label_states(problem, X, jobs=jobs)
    return Dataset(X=X, U=U, box=box, delta=delta,
                   problem_name=problem.name, seed=seed)


def save_dataset(ds: Dataset, path) -> None:
    """One JSON header line, then raw little-endian float64 X and U blocks."""
    header = {
        "format": _MAGIC,
        "version": 1,
        "rows": int(len(ds)),
        "n": int(ds.n),
        "m": int(ds.m),
        "delta": ds.delta,
        "box_lo": ds.box.lo.tolist(),
        "box_hi": ds.box.hi.tolist(),
        "problem": ds.problem_name,
        "seed": ds.seed,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(ds.X).astype("<f8", copy=False).tobytes())
        fh.write(np.ascontiguousarray(ds.U).astype("<f8", copy=False).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: not a dataset file") from exc
        if header.get("format") != _MAGIC:
            raise ValidationError(f"{path}: unexpected format tag {header.get('format')!r}")
        rows, n, m = header["rows"], header["n"], header["m"]
        blob = fh.read()
    need = 8 * rows * (n + m)
    if len(blob) != need:
        raise ValidationError(f"{path}: payload holds {len(blob)} bytes, expected {need}")
    X = np.frombuffer(blob[:8 * rows * n], dtype="<f8").reshape(rows, n).copy()
    U = np.frombuffer(blob[8 * rows * n:], dtype="<f8").reshape(rows, m).copy()
    return Dataset(X=X, U=U,
                   box=StateBox(np.array(header["box_lo"]), np.array(header["box_hi"])),
                   delta=header["delta"], problem_name=header.get("problem", "custom"),
                   seed=header.get("seed"))


def export_csv(ds: Dataset, path) -> None:
    cols = [f"x_{i+1}" for i in range(ds.n)] + [f"u_{j+1}" for j in range(ds.m)]
    data = np.hstack([ds.X, ds.U])
    np.savetxt(path, data, delimiter=",", header=",".join(cols),
               comments="", fmt="%.17g")


def load_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data
