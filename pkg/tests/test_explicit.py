import numpy as np
import pytest

from treempc.errors import NotCovered, TooLarge, ValidationError
from treempc.explicit import (RegionLaw, chebyshev_radius, enumerate_explicit,
                              eval_explicit, regions_from_dicts,
                              regions_to_dicts)
from treempc.qp import mpc_control
from treempc.system import BUILTIN_BOXES, LtiSystem, MpcProblem, builtin_problem

from oracles import riccati_first_gain


def _scalar_problem(u_lim=1.0):
    return MpcProblem(system=LtiSystem(np.eye(1), np.eye(1)), N=1,
                      Q=np.eye(1), R=np.eye(1), P=np.eye(1),
                      u_min=[-u_lim], u_max=[u_lim])


def test_scalar_clipped_law_has_three_regions():
    """1-D, N=1: u*(x) = clip(-x/2, -1, 1), switching at |x| = 2."""
    p = _scalar_problem()
    box = (np.array([-5.0]), np.array([5.0]))
    regions = enumerate_explicit(p, box=box)
    assert len(regions) == 3
    for x in np.linspace(-5, 5, 101):
        u = eval_explicit(regions, np.array([x]))
        assert u[0] == pytest.approx(np.clip(-x / 2.0, -1.0, 1.0), abs=1e-9)


def test_unconstrained_region_is_lqr():
    p = builtin_problem("case1")
    box = BUILTIN_BOXES["case1"]
    regions = enumerate_explicit(p, box=box)
    inner = [r for r in regions if np.max(np.abs(r.F)) > 0]
    assert len(inner) == 1
    K = riccati_first_gain(p.system.A, p.system.B, p.Q, p.R, p.P, p.N)
    assert np.max(np.abs(inner[0].F + K)) < 1e-8
    assert np.max(np.abs(inner[0].g)) < 1e-12


def test_case1_merges_to_three_regions():
    regions = enumerate_explicit(builtin_problem("case1"))
    assert len(regions) == 3
    gs = sorted(float(r.g[0]) for r in regions)
    assert gs == pytest.approx([-2.0, 0.0, 2.0], abs=1e-9)
    for r in regions:
        assert r.chebyshev_radius > 1e-6


def test_explicit_matches_qp_on_grid():
    p = builtin_problem("case1")
    lo, hi = BUILTIN_BOXES["case1"]
    regions = enumerate_explicit(p)
    rng = np.random.default_rng(0)
    X = rng.uniform(lo, hi, size=(400, 2))
    worst = 0.0
    for x in X:
        worst = max(worst, abs(float(eval_explicit(regions, x)[0]
                                     - mpc_control(p, x)[0])))
    assert worst < 1e-7


def test_law_continuous_across_shared_facets():
    """Adjacent laws agree on the dividing hyperplane (sampled midpoints)."""
    p = builtin_problem("case1")
    regions = enumerate_explicit(p)
    rng = np.random.default_rng(1)
    lo, hi = BUILTIN_BOXES["case1"]
    X = rng.uniform(lo, hi, size=(3000, 2))
    # bisect between points in different regions down to the boundary
    def region_of(x):
        for i, r in enumerate(regions):
            if r.contains(x, 1e-12):
                return i
        return -1
    checked = 0
    for i in range(0, len(X) - 1, 2):
        a, b = X[i], X[i + 1]
        ra, rb = region_of(a), region_of(b)
        if ra < 0 or rb < 0 or ra == rb:
            continue
        for _ in range(60):
            mid = 0.5 * (a + b)
            if region_of(mid) == ra:
                a = mid
            else:
                b = mid
        ia, ib = region_of(a), region_of(b)
        ua = regions[ia].F @ a + regions[ia].g
        ub = regions[ib].F @ a + regions[ib].g
        assert np.max(np.abs(ua - ub)) < 1e-6
        checked += 1
    assert checked > 30


def test_eval_outside_all_regions_raises():
    p = _scalar_problem()
    regions = enumerate_explicit(p, box=(np.array([-1.0]), np.array([1.0])))
    # only the interior law survives in a box that never saturates
    assert len(regions) == 1
    with pytest.raises(NotCovered):
        eval_explicit(regions, np.array([50.0]))


def test_enumeration_guards():
    p2 = builtin_problem("case2")   # N*m = 17 > default cap
    with pytest.raises(TooLarge):
        enumerate_explicit(p2)
    bounded = MpcProblem(system=LtiSystem(np.eye(1) * 0.5, np.eye(1)), N=1,
                         Q=np.eye(1), R=np.eye(1), P=np.eye(1),
                         u_min=[-1], u_max=[1], x_min=[-2], x_max=[2])
    with pytest.raises(ValidationError):
        enumerate_explicit(bounded, box=(np.array([-1.0]), np.array([1.0])))


def test_regions_serialization_roundtrip():
    regions = enumerate_explicit(builtin_problem("case1"))
    back = regions_from_dicts(regions_to_dicts(regions))
    assert len(back) == len(regions)
    for r, s in zip(regions, back):
        assert np.array_equal(r.H, s.H)
        assert np.array_equal(r.l, s.l)
        assert np.array_equal(r.F, s.F)
        assert np.array_equal(r.g, s.g)
        assert r.active_set == s.active_set


def test_chebyshev_radius_of_square():
    H = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    l = np.ones(4)
    r = chebyshev_radius(H, l, np.full(2, -5.0), np.full(2, 5.0))
    assert r == pytest.approx(1.0, abs=1e-7)
    # empty set: contradictory rows
    H2 = np.array([[1.0, 0.0], [-1.0, 0.0]])
    l2 = np.array([-3.0, 2.0])      # x <= -3 and x >= -2
    assert chebyshev_radius(H2, l2, np.full(2, -5.0), np.full(2, 5.0)) < 0


def test_region_contains_uses_tolerance():
    H = np.array([[1.0, 0.0]])
    reg = RegionLaw(H=H, l=np.array([0.0]), F=np.zeros((1, 2)),
                    g=np.zeros(1), active_set=(0,), chebyshev_radius=1.0)
    assert reg.contains(np.array([1e-12, 0.0]), 1e-9)
    assert not reg.contains(np.array([1e-3, 0.0]), 1e-9)
