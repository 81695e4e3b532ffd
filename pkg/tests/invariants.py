"""Seeded property suites shared by the module tests and the acceptance suite.

Each suite runs a fixed number of random cases and returns the measured
extremes; callers assert against their own tolerances, so the same machinery
serves both quick module checks and the full thousand-case acceptance runs.
"""

import json

import numpy as np

from treempc.dataset import (Dataset, StateBox, generate_dataset,
                             load_dataset, save_dataset)
from treempc.system import LtiSystem, MpcProblem, problem_from_dict, \
    problem_to_dict
from treempc.tree import ObliqueTree
from treempc.training import SoftTreeParams, leaf_weights, soft_forward

ALPHA_CHOICES = (1.0, 10.0, 100.0, 512.0)


def random_soft_params(rng, max_depth=3, max_n=4, max_m=2):
    depth = int(rng.integers(1, max_depth + 1))
    n = int(rng.integers(1, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    B, L = 2 ** depth - 1, 2 ** depth
    return SoftTreeParams(depth=depth,
                          a=rng.normal(size=(B, n)),
                          b=rng.normal(size=B),
                          c=rng.normal(size=(L, n, m)),
                          d=rng.normal(size=(L, m)),
                          alpha=float(rng.choice(ALPHA_CHOICES)))


def weight_normalization_suite(n_cases, seed=0, draws_per_case=8):
    """Returns (worst |sum_t w_t - 1|, most negative weight seen)."""
    rng = np.random.default_rng(seed)
    worst_dev = 0.0
    min_weight = np.inf
    for _ in range(n_cases):
        p = random_soft_params(rng)
        X = rng.uniform(-4.0, 4.0, size=(draws_per_case, p.n))
        W = leaf_weights(p, X)
        worst_dev = max(worst_dev, float(np.max(np.abs(W.sum(axis=1) - 1.0))))
        min_weight = min(min_weight, float(W.min()))
    return worst_dev, min_weight


def soft_hard_margin_suite(n_cases, seed=0, margin_factor=10.0):
    """Soft vs hard prediction gap for points clear of every split.

    Draws random parameters, keeps sample points whose smallest branch
    margin |b_j - a_j'x| is at least margin_factor / alpha, and returns
    (worst gap, number of cases, number of points tested). Cases where no
    draw clears the margin are redrawn so n_cases always carry data.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    n_points = 0
    done = 0
    while done < n_cases:
        p = random_soft_params(rng)
        X = rng.uniform(-3.0, 3.0, size=(32, p.n))
        margins = np.min(np.abs(X @ p.a.T - p.b), axis=1)
        keep = margins >= margin_factor / p.alpha
        if not np.any(keep):
            continue
        done += 1
        Xk = X[keep]
        n_points += Xk.shape[0]
        hard = p.as_tree().predict_batch(Xk)
        gap = np.max(np.abs(soft_forward(p, Xk) - hard))
        worst = max(worst, float(gap))
    return worst, done, n_points


def _random_problem(rng, n_max=3, m_max=2):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    A = rng.normal(size=(n, n))
    radius = max(np.abs(np.linalg.eigvals(A)))
    A *= 0.9 / max(radius, 1e-6)
    B = rng.normal(size=(n, m))
    Q = np.eye(n) * float(rng.uniform(0.5, 2.0))
    R = np.eye(m) * float(rng.uniform(0.1, 1.0))
    u_lim = rng.uniform(0.5, 2.0, size=m)
    return MpcProblem(system=LtiSystem(A, B), N=int(rng.integers(1, 4)),
                      Q=Q, R=R, P=Q, u_min=-u_lim, u_max=u_lim)


def serialization_suite(n_cases, seed, tmp_dir):
    """Roundtrips trees, datasets and problems; returns mismatch count.

    Trees go through dict and file forms, datasets through the binary file
    format, problems through their JSON dict; every array must come back
    bit-identical.
    """
    rng = np.random.default_rng(seed)
    tmp_dir = str(tmp_dir)
    mismatches = 0
    for case in range(n_cases):
        kind = case % 3
        if kind == 0:
            depth = int(rng.integers(0, 4))
            n = int(rng.integers(1, 5))
            m = int(rng.integers(1, 3))
            B, L = 2 ** depth - 1, 2 ** depth
            t = ObliqueTree(depth=depth, branch_a=rng.normal(size=(B, n)),
                            branch_b=rng.normal(size=B),
                            leaf_c=rng.normal(size=(L, n, m)),
                            leaf_d=rng.normal(size=(L, m)))
            back = ObliqueTree.from_dict(
                json.loads(json.dumps(t.to_dict())))
            path = f"{tmp_dir}/tree_{case}.json"
            t.save(path)
            disk = ObliqueTree.load(path)
            for other in (back, disk):
                if not (np.array_equal(other.branch_a, t.branch_a)
                        and np.array_equal(other.branch_b, t.branch_b)
                        and np.array_equal(other.leaf_c, t.leaf_c)
                        and np.array_equal(other.leaf_d, t.leaf_d)):
                    mismatches += 1
        elif kind == 1:
            n = int(rng.integers(1, 4))
            m = int(rng.integers(1, 3))
            S = int(rng.integers(1, 40))
            box = StateBox(-np.ones(n), np.ones(n))
            ds = Dataset(X=rng.normal(size=(S, n)), U=rng.normal(size=(S, m)),
                         box=box, delta=float(rng.uniform(0.01, 1.0)),
                         problem_name="custom", seed=int(rng.integers(1000)))
            path = f"{tmp_dir}/ds_{case}.dsbin"
            save_dataset(ds, path)
            back = load_dataset(path)
            if not (np.array_equal(back.X, ds.X)
                    and np.array_equal(back.U, ds.U)
                    and np.array_equal(back.box.lo, ds.box.lo)
                    and np.array_equal(back.box.hi, ds.box.hi)
                    and back.delta == ds.delta and back.seed == ds.seed):
                mismatches += 1
        else:
            p = _random_problem(rng)
            back = problem_from_dict(
                json.loads(json.dumps(problem_to_dict(p))))
            same = (np.array_equal(back.system.A, p.system.A)
                    and np.array_equal(back.system.B, p.system.B)
                    and np.array_equal(back.Q, p.Q)
                    and np.array_equal(back.R, p.R)
                    and np.array_equal(back.P, p.P)
                    and np.array_equal(back.u_min, p.u_min)
                    and np.array_equal(back.u_max, p.u_max)
                    and np.array_equal(back.x_min, p.x_min)
                    and np.array_equal(back.x_max, p.x_max)
                    and back.N == p.N)
            if not same:
                mismatches += 1
    return mismatches


def dataset_determinism_suite(n_cases, seed=0):
    """Regenerates random datasets serially and threaded; returns mismatches.

    Each case labels at least 64 grid points (the threshold below which
    labeling stays serial) with jobs=1 and again with jobs in {2, 3, 4};
    the arrays must match bit for bit.
    """
    rng = np.random.default_rng(seed)
    mismatches = 0
    for case in range(n_cases):
        p = _random_problem(rng)
        n = p.system.n
        half = float(rng.uniform(1.0, 3.0))
        box = StateBox(-half * np.ones(n), half * np.ones(n))
        count = int(rng.integers(64, 129))
        delta = 2.0 * half / np.ceil(count ** (1.0 / n))
        case_seed = int(rng.integers(10_000))
        jobs = int(rng.integers(2, 5))
        one = generate_dataset(p, box, delta, count=count, seed=case_seed,
                               jobs=1)
        par = generate_dataset(p, box, delta, count=count, seed=case_seed,
                               jobs=jobs)
        if not (np.array_equal(one.X, par.X) and np.array_equal(one.U, par.U)):
            mismatches += 1
    return mismatches
