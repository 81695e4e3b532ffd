"""Closed-loop evaluation: simulation, the tracking metric, error bounds,
stability probing and timing.

Everything here compares a candidate controller (usually a hardened tree)
against the exact receding-horizon law. The offline approximation error
admits the bound

    max_x ||u_tree(x) - u_mpc(x)||  <=  delta_dt + j_max
                                        + (k_dt + k_max) * sqrt(n) * delta_x / 2

where delta_dt is the worst training-point error, j_max the largest
discontinuity across tree facets, the two Lipschitz terms cover drift
between lattice points, and sqrt(n) * delta_x / 2 is the half-diagonal of
one grid cell.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import _accel
from .dataset import Dataset, StateBox, label_states, lattice_shape
from .errors import (ControllerFailure, TooShort, TreeMpcError,
                     ValidationError)
from .explicit import eval_explicit
from .qp import STATUS_OPTIMAL, condense, solve_qp
from .system import MpcProblem
from .tree import ObliqueTree, estimate_max_jump, lipschitz_max

LAMBDA_WINDOW = 20

_KMAX_STREAM = 0x4B4D
_CHECK_STREAM = 0xC4EC
_ISS_STREAM = 0x1551


class TreeController:
    """Callable wrapper so a tree plugs in wherever a controller is expected."""

    name = "tree"

    def __init__(self, tree: ObliqueTree, problem: MpcProblem | None = None):
        self.tree = tree
        self.problem = problem

    def reset(self):
        pass

    def __call__(self, x):
        u = self.tree.predict(x)
        if self.problem is not None:
            u = self.problem.clamp(u)
        return u

    def timed_repeat(self, x, reps):
        x = np.ascontiguousarray(x, dtype=np.float64)
        t = self.tree
        return _accel.tree_eval_repeat(t.branch_a, t.branch_b, t.leaf_c,
                                       t.leaf_d, t.depth, x, reps)


class ExplicitController:
    """Region lookup controller built from an enumerated law list."""

    name = "explicit"

    def __init__(self, regions, tol=1e-9):
        self.regions = list(regions)
        self.tol = tol

    def reset(self):
        pass

    def __call__(self, x):
        return eval_explicit(self.regions, x, tol=self.tol)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Additive state disturbance w and measurement error e, both bounded in
    the infinity norm. Mode "uniform" draws componentwise uniform values;
    "signflip" uses full-magnitude entries with random signs (a rough
    worst-case probe)."""

    w_bound: float = 0.0
    e_bound: float = 0.0
    seed: int = 0
    mode: str = "uniform"

    def __post_init__(self):
        if self.w_bound < 0 or self.e_bound < 0:
            raise ValidationError("disturbance bounds must be >= 0")
        if self.mode not in ("uniform", "signflip"):
            raise ValidationError(f"unknown disturbance mode {self.mode!r}")

    def draw(self, n, steps, stream=0):
        rng = np.random.default_rng([self.seed, stream])
        if self.mode == "uniform":
            w = rng.uniform(-self.w_bound, self.w_bound, (steps, n))
            e = rng.uniform(-self.e_bound, self.e_bound, (steps, n))
        else:
            w = self.w_bound * np.where(rng.random((steps, n)) < 0.5, -1.0, 1.0)
            e = self.e_bound * np.where(rng.random((steps, n)) < 0.5, -1.0, 1.0)
        return w, e


def lambda_metric(trajectory, Q, window=LAMBDA_WINDOW):
    """Average tracking error (1/window) * sum_{t=1..window} x(t)' Q x(t).

    `trajectory` is the (steps+1, n) state array of a rollout regulated to
    the origin. Needs at least window+1 states.
    """
    X = np.atleast_2d(np.asarray(trajectory, dtype=np.float64))
    if X.shape[0] < window + 1:
        raise TooShort(f"need {window + 1} states for the {window}-step "
                       f"metric, got {X.shape[0]}")
    Q = np.asarray(Q, dtype=np.float64)
    tail = X[1:window + 1]
    return float(np.einsum("ti,ij,tj->", tail, Q, tail) / window)


@dataclass
class SimResult:
    states: np.ndarray        # (steps + 1, n)
    inputs: np.ndarray        # (steps, m)
    lam: float | None         # tracking metric, None below LAMBDA_WINDOW steps
    violated: bool            # any input/state bound breach beyond 1e-6

    @property
    def steps(self):
        return self.inputs.shape[0]

    @property
    def max_abs_state(self):
        return float(np.max(np.abs(self.states)))


def simulate(problem: MpcProblem, controller, x0, steps,
             dist: DisturbanceSpec | None = None, dist_stream=0,
             clamp=True, reset=True) -> SimResult:
    """Roll the closed loop forward from x0 for `steps` steps.

    The controller sees the measured state x + e(k) and its output is
    clamped into the input box before being applied (a learned tree can
    overshoot the bounds slightly). A controller that raises or returns
    non-finite values aborts the rollout with ControllerFailure.
    """
    x = np.asarray(x0, dtype=np.float64).reshape(problem.n).copy()
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if reset and hasattr(controller, "reset"):
        controller.reset()

    if dist is None:
        W = E = np.zeros((steps, problem.n))
    else:
        W, E = dist.draw(problem.n, steps, stream=dist_stream)

    states = np.empty((steps + 1, problem.n))
    inputs = np.empty((steps, problem.m))
    states[0] = x
    for k in range(steps):
        try:
            u_raw = controller(x + E[k])
        except TreeMpcError as exc:
            raise ControllerFailure(f"controller failed at step {k}: {exc}") from exc
        u_raw = np.asarray(u_raw, dtype=np.float64).reshape(problem.m)
        if not np.all(np.isfinite(u_raw)):
            raise ControllerFailure(f"non-finite input at step {k}")
        inputs[k] = problem.clamp(u_raw) if clamp else u_raw
        x = problem.system.step(x, inputs[k]) + W[k]
        states[k + 1] = x

    violated = bool(
        np.any(inputs > problem.u_max + 1e-6)
        or np.any(inputs < problem.u_min - 1e-6)
        or np.any(states > problem.x_max + 1e-6)
        or np.any(states < problem.x_min - 1e-6))
    lam = lambda_metric(states, problem.Q) if steps >= LAMBDA_WINDOW else None
    return SimResult(states=states, inputs=inputs, lam=lam, violated=violated)


def lambda_ratios(problem: MpcProblem, controller, baseline, x0s,
                  steps=LAMBDA_WINDOW, dist: DisturbanceSpec | None = None,
                  floor=1e-12):
    """Per-start ratio of tracking metrics, controller over baseline.

    Both loops run from the same x0 with the same disturbance draw; the mean
    of the returned array minus one is the relative closed-loop performance
    loss. The floor guards starts whose baseline metric is essentially zero.
    """
    if steps < LAMBDA_WINDOW:
        raise TooShort(f"need at least {LAMBDA_WINDOW} steps, got {steps}")
    x0s = np.atleast_2d(np.asarray(x0s, dtype=np.float64))
    out = np.empty(x0s.shape[0])
    for i, x0 in enumerate(x0s):
        rc = simulate(problem, controller, x0, steps, dist=dist, dist_stream=i)
        rb = simulate(problem, baseline, x0, steps, dist=dist, dist_stream=i)
        out[i] = (rc.lam + floor) / (rb.lam + floor)
    return out


def _forward_offsets(n):
    """Nonzero {-1,0,1}^n offsets whose first nonzero entry is +1."""
    out = []
    for off in itertools.product((-1, 0, 1), repeat=n):
        nz = [v for v in off if v != 0]
        if nz and nz[0] == 1:
            out.append(np.array(off, dtype=np.int64))
    return out


def estimate_k_max(problem: MpcProblem, ds: Dataset, extra_probes=512,
                   seed=0, tol=1e-9) -> float:
    """Difference-quotient estimate of the exact law's Lipschitz constant.

    Takes the max of ||u_i - u_j|| / ||x_i - x_j|| over all pairs of dataset
    points that are lattice neighbors (Chebyshev distance 1, diagonals
    included). When the dataset is a subsample rather than the complete
    lattice, neighbor pairs are scarce, so fresh random-direction probe
    pairs of step delta are labeled and folded in as well.
    """
    if ds.delta is None:
        raise ValidationError("dataset carries no lattice spacing")
    delta = float(ds.delta)
    coords = np.rint((ds.X - ds.box.lo) / delta).astype(np.int64)
    table = {tuple(row): i for i, row in enumerate(coords)}

    worst = 0.0
    offsets = _forward_offsets(ds.n)
    steps = [delta * float(np.linalg.norm(off)) for off in offsets]
    for key, i in table.items():
        base = np.array(key, dtype=np.int64)
        for off, step in zip(offsets, steps):
            j = table.get(tuple(base + off))
            if j is None:
                continue
            worst = max(worst, float(np.linalg.norm(ds.U[j] - ds.U[i])) / step)

    shape = lattice_shape(ds.box, ds.delta)
    complete = int(np.prod(shape, dtype=np.int64)) == len(ds)
    if not complete and extra_probes > 0:
        worst = max(worst, _probe_k_max(problem, ds.box, delta,
                                        extra_probes, seed, tol))
    return worst


def _probe_k_max(problem, box, delta, n_probes, seed, tol):
    """Random-direction probe pairs labeled on demand."""
    rng = np.random.default_rng([seed, _KMAX_STREAM])
    qp = condense(problem)
    inner = box.scaled(1.0 - min(0.5, delta / float(np.min(box.hi - box.lo))))
    X0 = inner.sample(n_probes, rng)
    dirs = rng.standard_normal((n_probes, box.n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    worst = 0.0
    for i in range(n_probes):
        x0 = X0[i]
        x1 = x0 + delta * dirs[i]
        s0 = solve_qp(qp, x0, tol=tol)
        s1 = solve_qp(qp, x1, tol=tol)
        if s0.status != STATUS_OPTIMAL or s1.status != STATUS_OPTIMAL:
            continue
        worst = max(worst, float(np.linalg.norm(s1.u0 - s0.u0)) / delta)
    return worst


def assemble_error_bound(delta_dt, j_max, k_dt, k_max, n, delta_x):
    """Combine the four measured ingredients into the offline bound."""
    return float(delta_dt + j_max
                 + (k_dt + k_max) * np.sqrt(n) * delta_x / 2.0)


@dataclass
class ErrorBoundReport:
    delta_dt: float       # worst ||tree - label|| over the training lattice
    j_max: float          # largest facet discontinuity of the tree
    k_dt: float           # largest leaf gain norm
    k_max: float          # difference-quotient estimate for the exact law
    delta_x: float
    n: int
    bound: float
    empirical_max: float  # worst ||tree - mpc|| over fresh check states
    n_check: int
    violated: bool
    k_max_certified: float | None = None  # max region gain norm if enumerable

    def to_dict(self):
        out = {}
        for k, v in self.__dict__.items():
            if k == "violated":
                out[k] = bool(v)
            elif k in ("n", "n_check"):
                out[k] = int(v)
            else:
                out[k] = None if v is None else float(v)
        return out


def error_bound_report(tree: ObliqueTree, problem: MpcProblem, ds: Dataset,
                       test_states=None, n_check=2000, jump_samples=256,
                       jump_mode="sample", k_max_probes=512, seed=0, jobs=1,
                       regions=None) -> ErrorBoundReport:
    """Measure every bound ingredient and test the bound on fresh states.

    `test_states` defaults to seeded uniform draws from the dataset box.
    When the enumerated region list is supplied, the certified law Lipschitz
    constant max ||F_i||_2 is reported alongside the lattice estimate (the
    bound itself always uses the estimate).
    """
    if ds.delta is None:
        raise ValidationError("error bound needs a lattice-spaced dataset")

    resid = tree.predict_batch(ds.X) - ds.U
    delta_dt = float(np.sqrt(np.sum(resid * resid, axis=1)).max())

    j_max = estimate_max_jump(tree, ds.box, samples_per_facet=jump_samples,
                              seed=seed, mode=jump_mode)
    k_dt = lipschitz_max(tree)
    k_max = estimate_k_max(problem, ds, extra_probes=k_max_probes, seed=seed)
    bound = assemble_error_bound(delta_dt, j_max, k_dt, k_max, ds.n, ds.delta)

    if test_states is None:
        rng = np.random.default_rng([seed, _CHECK_STREAM])
        test_states = ds.box.sample(n_check, rng)
    Xk, Uk, _ = label_states(problem, test_states, jobs=jobs)
    diff = tree.predict_batch(Xk) - Uk
    empirical = float(np.sqrt(np.sum(diff * diff, axis=1)).max())

    certified = None
    if regions is not None:
        certified = max(float(np.linalg.norm(reg.F, 2)) for reg in regions)

    return ErrorBoundReport(delta_dt=delta_dt, j_max=j_max, k_dt=k_dt,
                            k_max=k_max, delta_x=float(ds.delta), n=ds.n,
                            bound=bound, empirical_max=empirical,
                            n_check=Xk.shape[0], violated=empirical > bound,
                            k_max_certified=certified)


@dataclass
class IssReport:
    n_traj: int
    steps: int
    n_contained: int        # trajectories that never left the box
    n_terminal_ok: int      # trajectories whose tail stays small
    worst_terminal: float   # max tail infinity norm over all trajectories
    worst_state: float      # max infinity norm anywhere
    terminal_threshold: float
    passed: bool

    def to_dict(self):
        return {k: (bool(v) if k == "passed" else
                    float(v) if k in ("worst_terminal", "worst_state",
                                      "terminal_threshold") else int(v))
                for k, v in self.__dict__.items()}


def default_iss_starts(box: StateBox, count=100, seed=0, scale=0.5):
    """Seeded start states drawn from the scaled sampling box."""
    rng = np.random.default_rng([seed, _ISS_STREAM])
    return box.scaled(scale).sample(count, rng)


def iss_probe(problem: MpcProblem, controller, starts, box: StateBox,
              dist: DisturbanceSpec | None = None, steps=50,
              terminal_window=5, terminal_threshold=0.1) -> IssReport:
    """Disturbed closed-loop stability probe.

    Runs one rollout per start state under the bounded disturbance (default
    0.01 noise on both state and measurement). A trajectory passes if it
    never leaves the box and its last `terminal_window` states stay below
    the threshold in the infinity norm, i.e. the loop converges to a small
    neighborhood of the origin instead of to the origin itself. Failures are
    results, not errors.
    """
    if terminal_window > steps:
        raise ValidationError("terminal_window cannot exceed steps")
    if dist is None:
        dist = DisturbanceSpec(w_bound=0.01, e_bound=0.01)
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    n_contained = 0
    n_terminal_ok = 0
    worst_terminal = 0.0
    worst_state = 0.0
    for i, x0 in enumerate(starts):
        res = simulate(problem, controller, x0, steps, dist=dist,
                       dist_stream=i)
        tail_inf = float(np.max(np.abs(res.states[steps + 1 - terminal_window:])))
        worst_terminal = max(worst_terminal, tail_inf)
        worst_state = max(worst_state, res.max_abs_state)
        if box.contains_rows(res.states).all():
            n_contained += 1
        if tail_inf <= terminal_threshold:
            n_terminal_ok += 1
    n_traj = starts.shape[0]
    passed = (n_contained == n_traj) and (n_terminal_ok == n_traj)
    return IssReport(n_traj=n_traj, steps=steps, n_contained=n_contained,
                     n_terminal_ok=n_terminal_ok,
                     worst_terminal=worst_terminal, worst_state=worst_state,
                     terminal_threshold=terminal_threshold, passed=passed)


@dataclass
class TimingRow:
    name: str
    n_states: int
    reps: int
    mean_s: float
    worst_s: float
    p99_s: float

    def to_dict(self):
        return {"name": self.name, "n_states": int(self.n_states),
                "reps": int(self.reps), "mean_s": float(self.mean_s),
                "worst_s": float(self.worst_s), "p99_s": float(self.p99_s)}


@dataclass
class TimingReport:
    backend: str
    rows: list

    def row(self, name) -> TimingRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self):
        return {"backend": self.backend,
                "rows": [r.to_dict() for r in self.rows]}


def _named_controllers(controllers):
    if hasattr(controllers, "items"):
        return list(controllers.items())
    if callable(controllers) and not isinstance(controllers, (list, tuple)):
        controllers = [controllers]
    out = []
    for item in controllers:
        if isinstance(item, tuple):
            out.append(item)
        else:
            out.append((getattr(item, "name", type(item).__name__), item))
    return out


def benchmark_timing(controllers, states, repetitions=100) -> TimingReport:
    """Per-evaluation wall time of each controller over a batch of states.

    Controllers exposing `timed_repeat(x, reps)` (the tree and the box-QP
    path) run the repeat loop inside compiled code so the clock wraps only
    the kernel call; others fall back to a Python repeat loop. One warmup
    evaluation per state keeps compilation out of the measurement.
    """
    X = np.atleast_2d(np.asarray(states, dtype=np.float64))
    S = X.shape[0]
    if S == 0 or repetitions < 1:
        raise ValidationError("need at least one state and one repetition")
    rows = []
    for name, ctrl in _named_controllers(controllers):
        per = np.empty(S)
        has_hook = hasattr(ctrl, "timed_repeat")
        for i in range(S):
            x = np.ascontiguousarray(X[i])
            if has_hook:
                ctrl.timed_repeat(x, 1)
                t0 = time.perf_counter()
                ctrl.timed_repeat(x, repetitions)
                per[i] = (time.perf_counter() - t0) / repetitions
            else:
                ctrl(x)
                t0 = time.perf_counter()
                for _ in range(repetitions):
                    ctrl(x)
                per[i] = (time.perf_counter() - t0) / repetitions
        rows.append(TimingRow(name=name, n_states=S, reps=repetitions,
                              mean_s=float(per.mean()),
                              worst_s=float(per.max()),
                              p99_s=float(np.percentile(per, 99))))
    return TimingReport(backend=_accel.BACKEND, rows=rows)


def mpc_chain_timing(problem: MpcProblem, x0s, steps=40,
                     warm=True) -> TimingReport:
    """Per-solve wall time of the exact controller along closed-loop runs.

    Complements `benchmark_timing` (which solves cold at fixed states): here
    each solve warm-starts from its predecessor, the favorable regime for
    active-set methods.
    """
    from .qp import MpcController

    x0s = np.atleast_2d(np.asarray(x0s, dtype=np.float64))
    ctrl = MpcController(problem, warm=warm)
    ctrl(x0s[0])  # compile before the clock starts
    times = []
    for x0 in x0s:
        ctrl.reset()
        x = x0.copy()
        for _ in range(steps):
            t0 = time.perf_counter()
            u = ctrl(x)
            times.append(time.perf_counter() - t0)
            x = problem.system.step(x, problem.clamp(u))
    per = np.asarray(times)
    name = "mpc_warm_chain" if warm else "mpc_cold_chain"
    row = TimingRow(name=name, n_states=per.size, reps=1,
                    mean_s=float(per.mean()), worst_s=float(per.max()),
                    p99_s=float(np.percentile(per, 99)))
    return TimingReport(backend=_accel.BACKEND, rows=[row])
