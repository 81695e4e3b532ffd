"""Condensed QP form of the MPC problem and its active-set solution.

Stacking the predicted states X = Sx x0 + Su U into the horizon cost gives

    J(x0, U) = U' H U + 2 x0' F U + x0' Y x0

with H = Rbar + Su' Qbar Su symmetric positive definite, F = Sx' Qbar Su and
Y = Sx' Qbar Sx. For the one-step scalar sanity case (A = B = Q = R = P = 1)
this means H = R + B'PB = 2 and F = A'PB = 1. Constraints are kept as
componentwise bounds on U plus, when state bounds are finite, general rows
G U <= w + E x0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._qp_impl import QP_MAX_ITER, QP_OPTIMAL
from .errors import QpInfeasible, QpMaxIterations, ValidationError
from .system import MpcProblem

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITERATIONS = "max_iterations"

DEFAULT_KKT_TOL = 1e-9
DEFAULT_MAX_ITER = 500


@dataclass(frozen=True)
class CondensedQp:
    """Input-only form of the horizon problem for a fixed prediction model."""

    H: np.ndarray          # (d, d) quadratic coefficient, d = N*m
    F: np.ndarray          # (n, d) state-input cross term
    Y: np.ndarray          # (n, n) state-only constant term
    G: np.ndarray          # (n_c, d) constraint rows, G U <= w + E x0
    w: np.ndarray          # (n_c,)
    E: np.ndarray          # (n_c, n)
    lb: np.ndarray         # (d,) input lower bounds stacked over the horizon
    ub: np.ndarray         # (d,)
    N: int
    n: int
    m: int
    n_state_rows: int      # trailing rows of G that came from state bounds

    @property
    def d(self) -> int:
        return self.N * self.m

    def linear_term(self, x0):
        return 2.0 * (self.F.T @ x0)

    def cost(self, x0, U):
        """Exact horizon cost of input sequence U from state x0."""
        z = np.asarray(U, dtype=np.float64).reshape(self.d)
        x0 = np.asarray(x0, dtype=np.float64).reshape(self.n)
        return float(z @ self.H @ z + 2.0 * (x0 @ self.F @ z) + x0 @ self.Y @ x0)


@dataclass(frozen=True)
class QpSolution:
    u_seq: np.ndarray | None   # (N, m) or None when not optimal
    u0: np.ndarray | None      # (m,)
    objective: float
    status: str
    kkt_residual: float
    iterations: int
    active: np.ndarray | None = field(default=None, repr=False)


def condense(problem: MpcProblem) -> CondensedQp:
    """Eliminate the states from the horizon problem."""
    A, B = problem.system.A, problem.system.B
    n, m, N = problem.n, problem.m, problem.N
    d = N * m

    # Sx stacks A^k, Su the impulse responses, blocks k = 0..N.
    Sx = np.zeros(((N + 1) * n, n))
    Su = np.zeros(((N + 1) * n, d))
    Sx[:n] = np.eye(n)
    for k in range(1, N + 1):
        rows = slice(k * n, (k + 1) * n)
        prev = slice((k - 1) * n, k * n)
        Sx[rows] = A @ Sx[prev]
        Su[rows] = A @ Su[prev]
        Su[rows, (k - 1) * m:k * m] = B

    Qbar = np.zeros(((N + 1) * n, (N + 1) * n))
    for k in range(N):
        Qbar[k * n:(k + 1) * n, k * n:(k + 1) * n] = problem.Q
    Qbar[N * n:, N * n:] = problem.P
    Rbar = np.kron(np.eye(N), problem.R)

    H = Su.T @ Qbar @ Su + Rbar
    H = 0.5 * (H + H.T)
    F = Sx.T @ Qbar @ Su
    Y = Sx.T @ Qbar @ Sx
    Y = 0.5 * (Y + Y.T)

    lb = np.tile(problem.u_min, N)
    ub = np.tile(problem.u_max, N)

    # Constraint rows: input bounds first, then state bounds where finite.
    rows_G, rows_w, rows_E = [], [], []
    eye_d = np.eye(d)
    for i in range(d):
        if np.isfinite(ub[i]):
            rows_G.append(eye_d[i])
            rows_w.append(ub[i])
            rows_E.append(np.zeros(n))
        if np.isfinite(lb[i]):
            rows_G.append(-eye_d[i])
            rows_w.append(-lb[i])
            rows_E.append(np.zeros(n))
    n_input_rows = len(rows_G)

    for k in range(N + 1):
        rows = slice(k * n, (k + 1) * n)
        Su_k, Sx_k = Su[rows], Sx[rows]
        for j in range(n):
            if np.isfinite(problem.x_max[j]):
                rows_G.append(Su_k[j])
                rows_w.append(problem.x_max[j])
                rows_E.append(-Sx_k[j])
            if np.isfinite(problem.x_min[j]):
                rows_G.append(-Su_k[j])
                rows_w.append(-problem.x_min[j])
                rows_E.append(Sx_k[j])

    G = np.array(rows_G).reshape(len(rows_G), d)
    w = np.array(rows_w, dtype=np.float64)
    E = np.array(rows_E).reshape(len(rows_G), n)

    return CondensedQp(H=H, F=F, Y=Y, G=G, w=w, E=E, lb=lb, ub=ub,
                       N=N, n=n, m=m, n_state_rows=len(rows_G) - n_input_rows)


def _solve_box(qp: CondensedQp, x0, tol, max_iter, warm):
    q = qp.linear_term(x0)
    if warm is None:
        z0 = np.zeros(qp.d)
        a0 = np.zeros(qp.d, dtype=np.int8)
    else:
        z0, a0 = warm
        z0 = np.asarray(z0, dtype=np.float64).copy()
        a0 = np.asarray(a0, dtype=np.int8).copy()
    z, active, status, iters, res = _accel.qp_box_active_set(
        qp.H, q, qp.lb, qp.ub, z0, a0, tol, max_iter)
    if status == QP_MAX_ITER:
        return QpSolution(None, None, np.nan, STATUS_MAX_ITERATIONS,
                          float(res), iters, active)
    assert status == QP_OPTIMAL
    u_seq = z.reshape(qp.N, qp.m)
    return QpSolution(u_seq, u_seq[0].copy(), qp.cost(x0, z),
                      STATUS_OPTIMAL, float(res), iters, active)


def _phase1_feasible(G, h):
    """Feasible point for G z <= h via an elastic LP, or None."""
    from scipy.optimize import linprog

    n_c, d = G.shape
    # minimize s subject to G z - s <= h, s >= 0
    c = np.zeros(d + 1)
    c[-1] = 1.0
    A_ub = np.hstack([G, -np.ones((n_c, 1))])
    bounds = [(None, None)] * d + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=h, bounds=bounds, method="highs")
    if not res.success or res.x is None:
        return None
    if res.x[-1] > 1e-8:
        return None
    return res.x[:d]


def _solve_general(qp: CondensedQp, x0, tol, max_iter):
    """Active-set solve with general constraint rows (finite state bounds).

    Works on min 1/2 z'(2H)z + q'z s.t. G z <= h. Rare path: both built-in
    case studies have input bounds only.
    """
    H2 = 2.0 * qp.H
    q = qp.linear_term(x0)
    G = qp.G
    h = qp.w + qp.E @ np.asarray(x0, dtype=np.float64).reshape(qp.n)
    n_c, d = G.shape

    z = np.zeros(d)
    if np.any(G @ z > h):
        z = _phase1_feasible(G, h)
        if z is None:
            return QpSolution(None, None, np.nan, STATUS_INFEASIBLE,
                              np.inf, 0, None)
        # pull strictly inside where the elastic solution sits on the edge
        z = np.asarray(z, dtype=np.float64)

    work: list[int] = []
    lam = np.zeros(0)
    for it in range(1, max_iter + 1):
        nw = len(work)
        KKT = np.zeros((d + nw, d + nw))
        KKT[:d, :d] = H2
        rhs = np.empty(d + nw)
        rhs[:d] = -q
        if nw:
            Gw = G[work]
            KKT[:d, d:] = Gw.T
            KKT[d:, :d] = Gw
            rhs[d:] = h[work]
        sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
        z_new, lam = sol[:d], sol[d:]
        p = z_new - z
        if np.max(np.abs(p)) <= 1e-12 * max(1.0, np.max(np.abs(z))):
            if nw == 0 or lam.min() >= -tol:
                z = z_new
                resid = _general_kkt_residual(H2, q, G, h, z, work, lam, tol)
                u_seq = z.reshape(qp.N, qp.m)
                return QpSolution(u_seq, u_seq[0].copy(), qp.cost(x0, z),
                                  STATUS_OPTIMAL, resid, it, None)
            work.pop(int(np.argmin(lam)))
            continue
        # step toward z_new, stopping at the first blocking row
        alpha = 1.0
        blocker = -1
        Gp = G @ p
        slack = h - G @ z
        for i in range(n_c):
            if i in work or Gp[i] <= 1e-14:
                continue
            step = slack[i] / Gp[i]
            if step < alpha - 1e-14:
                alpha = max(step, 0.0)
                blocker = i
        z = z + alpha * p
        if blocker >= 0:
            work.append(blocker)
    return QpSolution(None, None, np.nan, STATUS_MAX_ITERATIONS,
                      np.inf, max_iter, None)


def _general_kkt_residual(H2, q, G, h, z, work, lam, tol):
    grad = H2 @ z + q
    if work:
        grad = grad + G[work].T @ lam
    res = float(np.max(np.abs(grad)))
    res = max(res, float(np.max(G @ z - h, initial=0.0)))
    if len(lam):
        res = max(res, float(max(0.0, -lam.min())))
    return res


def solve_qp(qp: CondensedQp, x0, tol=DEFAULT_KKT_TOL,
             max_iter=DEFAULT_MAX_ITER, warm=None) -> QpSolution:
    """Minimize the condensed cost at state x0.

    Uses the jitted box active-set path unless state-bound rows are present.
    `warm` is an optional (z, active) pair from a previous solution; results
    are identical to a cold solve up to active-set path rounding.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(qp.n)
    if not np.all(np.isfinite(x0)):
        raise ValidationError("x0 contains non-finite entries")
    if qp.n_state_rows == 0:
        return _solve_box(qp, x0, tol, max_iter, warm)
    return _solve_general(qp, x0, tol, max_iter)


def mpc_control(problem_or_qp, x0, tol=DEFAULT_KKT_TOL) -> np.ndarray:
    """First input move of the optimal sequence at x0.

    Raises QpInfeasible / QpMaxIterations instead of returning a status so
    callers that just want the control law stay simple.
    """
    qp = problem_or_qp if isinstance(problem_or_qp, CondensedQp) else condense(problem_or_qp)
    sol = solve_qp(qp, x0, tol=tol)
    if sol.status == STATUS_INFEASIBLE:
        raise QpInfeasible(f"no feasible input sequence from x0 = {np.asarray(x0)}")
    if sol.status == STATUS_MAX_ITERATIONS:
        raise QpMaxIterations("active-set iteration cap reached")
    return sol.u0


class MpcController:
    """Receding-horizon controller: condense once, solve per state.

    Carries warm-start data from the previous solve when warm=True
    (default for closed-loop use); reset() clears it.
    """

    name = "mpc"

    def __init__(self, problem: MpcProblem, tol=DEFAULT_KKT_TOL,
                 max_iter=DEFAULT_MAX_ITER, warm=True):
        self.problem = problem
        self.qp = condense(problem)
        self.tol = tol
        self.max_iter = max_iter
        self.warm = warm
        self._warm_data = None
        self.last_solution: QpSolution | None = None

    def reset(self):
        self._warm_data = None
        self.last_solution = None

    def __call__(self, x):
        warm = self._warm_data if self.warm else None
        sol = solve_qp(self.qp, x, tol=self.tol, max_iter=self.max_iter, warm=warm)
        if sol.status == STATUS_INFEASIBLE:
            raise QpInfeasible(f"no feasible input sequence from x = {np.asarray(x)}")
        if sol.status == STATUS_MAX_ITERATIONS:
            raise QpMaxIterations("active-set iteration cap reached")
        self.last_solution = sol
        if self.warm and sol.active is not None:
            self._warm_data = (sol.u_seq.reshape(-1), sol.active)
        return sol.u0

    # timing hook: repeat evaluations in a tight loop, cold each repetition
    def timed_repeat(self, x, reps):
        if self.qp.n_state_rows:
            sink = 0.0
            for _ in range(reps):
                sink += float(self(x)[0])
            return sink
        q = self.qp.linear_term(np.asarray(x, dtype=np.float64).reshape(self.qp.n))
        return _accel.qp_box_repeat(self.qp.H, q, self.qp.lb, self.qp.ub,
                                    self.tol, self.max_iter, reps)
