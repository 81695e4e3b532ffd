import numpy as np
import pytest

from treempc.errors import QpInfeasible
from treempc.qp import (MpcController, STATUS_INFEASIBLE, STATUS_OPTIMAL,
                        condense, mpc_control, solve_qp)
from treempc.system import LtiSystem, MpcProblem, builtin_problem

from oracles import (brute_force_box_qp, mpc_first_move_cvxpy,
                     random_stable_system, riccati_first_gain)


def _random_problem(rng, n=None, m=None, with_state_bounds=False):
    n = n or int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 3))
    A, B = random_stable_system(rng, n, m)
    M = rng.normal(size=(n, n))
    Q = M @ M.T + 0.1 * np.eye(n)
    Mr = rng.normal(size=(m, m))
    R = Mr @ Mr.T + 0.5 * np.eye(m)
    N = int(rng.integers(1, 5))
    kw = {}
    if with_state_bounds:
        kw = {"x_min": np.full(n, -6.0), "x_max": np.full(n, 6.0)}
    return MpcProblem(system=LtiSystem(A, B), N=N, Q=Q, R=R, P=Q,
                      u_min=np.full(m, -1.0), u_max=np.full(m, 1.0), **kw)


def test_condense_scalar_example():
    # A = B = Q = R = P = 1, N = 1: cost = (x+u)^2 + x^2 + u^2
    #   = 2u^2 + 2xu + 2x^2, so H = 2, F = 1, Y = 2.
    p = MpcProblem(system=LtiSystem(np.eye(1), np.eye(1)), N=1, Q=np.eye(1),
                   R=np.eye(1), P=np.eye(1), u_min=[-1], u_max=[1])
    qp = condense(p)
    assert qp.H == pytest.approx(np.array([[2.0]]))
    assert qp.F == pytest.approx(np.array([[1.0]]))
    assert qp.Y == pytest.approx(np.array([[2.0]]))
    assert qp.n_state_rows == 0


def test_condensed_cost_matches_rollout():
    """U'HU + 2 x'FU + x'Yx must equal the simulated horizon cost."""
    rng = np.random.default_rng(1)
    for _ in range(40):
        p = _random_problem(rng)
        qp = condense(p)
        x0 = rng.normal(size=p.n)
        U = rng.normal(size=p.N * p.m)
        lhs = float(U @ qp.H @ U + 2.0 * x0 @ qp.F @ U + x0 @ qp.Y @ x0)
        rhs = p.rollout_cost(x0, U)
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


def test_box_solver_against_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(60):
        p = _random_problem(rng, n=int(rng.integers(1, 3)), m=1)
        qp = condense(p)
        x0 = rng.normal(size=p.n) * 2.0
        sol = solve_qp(qp, x0)
        assert sol.status == STATUS_OPTIMAL
        z = sol.u_seq.reshape(-1)
        q = qp.linear_term(x0)
        z_ref, val_ref = brute_force_box_qp(qp.H, q, qp.lb, qp.ub)
        val = float(z @ qp.H @ z + q @ z)
        assert val == pytest.approx(val_ref, rel=1e-9, abs=1e-9)
        assert np.max(np.abs(z - z_ref)) < 1e-7


def test_solver_against_cvxpy_input_bounds_only():
    rng = np.random.default_rng(3)
    for _ in range(15):
        p = _random_problem(rng)
        x0 = rng.normal(size=p.n) * 1.5
        u_ref, status = mpc_first_move_cvxpy(p, x0)
        assert status in ("optimal", "optimal_inaccurate")
        u = mpc_control(p, x0)
        assert np.max(np.abs(u - u_ref)) < 1e-5


def test_solver_against_cvxpy_with_state_bounds():
    rng = np.random.default_rng(4)
    done = 0
    while done < 10:
        p = _random_problem(rng, with_state_bounds=True)
        x0 = rng.normal(size=p.n) * 1.2
        u_ref, status = mpc_first_move_cvxpy(p, x0)
        if u_ref is None:
            continue
        u = mpc_control(p, x0)
        assert np.max(np.abs(u - u_ref)) < 1e-5
        done += 1


def test_state_bound_infeasibility_detected():
    # one step cannot bring x inside the tight state box from far away
    p = MpcProblem(system=LtiSystem(np.eye(1), np.eye(1) * 0.01), N=1,
                   Q=np.eye(1), R=np.eye(1), P=np.eye(1),
                   u_min=[-1], u_max=[1], x_min=[-0.5], x_max=[0.5])
    qp = condense(p)
    sol = solve_qp(qp, np.array([30.0]))
    assert sol.status == STATUS_INFEASIBLE
    with pytest.raises(QpInfeasible):
        mpc_control(p, np.array([30.0]))


def test_unconstrained_states_match_lqr():
    """With bounds slack, the first move equals the Riccati feedback."""
    rng = np.random.default_rng(5)
    p = builtin_problem("case1")
    K = riccati_first_gain(p.system.A, p.system.B, p.Q, p.R, p.P, p.N)
    for _ in range(20):
        x0 = rng.normal(size=2) * 0.05   # small enough to stay unsaturated
        u = mpc_control(p, x0)
        assert np.max(np.abs(u + K @ x0)) < 1e-9


def test_warm_start_agrees_with_cold():
    p = builtin_problem("case2")
    rng = np.random.default_rng(6)
    warm = MpcController(p, warm=True)
    cold = MpcController(p, warm=False)
    x = rng.uniform(-1, 1, size=4)
    for _ in range(30):
        uw = warm(x)
        uc = cold(x)
        assert np.max(np.abs(uw - uc)) < 1e-8
        x = p.system.step(x, uw) + rng.normal(scale=0.02, size=4)


def test_controller_is_deterministic():
    p = builtin_problem("case2")
    xs = np.random.default_rng(7).uniform(-1, 1, size=(20, 4))
    a = np.array([MpcController(p)(x) for x in xs])
    b = np.array([MpcController(p)(x) for x in xs])
    assert np.array_equal(a, b)


def test_solution_respects_bounds_and_kkt():
    rng = np.random.default_rng(8)
    p = builtin_problem("case2")
    qp = condense(p)
    for _ in range(20):
        x0 = rng.uniform(-1, 1, size=4)
        sol = solve_qp(qp, x0)
        z = sol.u_seq.reshape(-1)
        assert np.all(z >= qp.lb - 1e-9)
        assert np.all(z <= qp.ub + 1e-9)
        g = 2.0 * qp.H @ z + qp.linear_term(x0)
        at_lo = z < qp.lb + 1e-9
        at_hi = z > qp.ub - 1e-9
        free = ~(at_lo | at_hi)
        assert np.max(np.abs(g[free]), initial=0.0) < 1e-6
        assert np.min(g[at_lo], initial=0.0) > -1e-6   # pushes down, blocked
        assert np.max(g[at_hi], initial=0.0) < 1e-6
