"""Head-to-head timing of the numba and numpy kernel backends.

Runs the three hot paths (box-QP active set, hard tree evaluation, smoothed
loss/gradient) on representative workloads with both kernel modules and
prints per-call times plus the speedup. Invoke directly:

    python3 benchmarks/backend_bench.py [--samples 4096] [--depth 8] [--reps 5]
"""

import argparse
import time

import numpy as np

from treempc import builtin_problem, condense, init_params
from treempc._accel import available_backends, get_kernels
from treempc.tree import leaf_paths


def _time_call(fn, reps):
    fn()  # warmup (also triggers jit compilation)
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_workloads(samples, depth, seed=0):
    rng = np.random.default_rng(seed)

    problem = builtin_problem("case2")
    qp = condense(problem)
    x0 = rng.uniform(-1.0, 1.0, problem.n)
    q = qp.linear_term(x0)

    n, m = 4, 1
    X = np.ascontiguousarray(rng.uniform(-1.0, 1.0, (samples, n)))
    U = np.ascontiguousarray(rng.uniform(-0.2, 0.2, (samples, m)))
    params = init_params((X, U), depth, rng)
    nodes, dirs = leaf_paths(depth)
    alpha = 32.0

    return {
        "box_qp_solve": lambda k: k.qp_box_repeat(
            qp.H, q, qp.lb, qp.ub, 1e-9, 500, 200),
        "tree_predict_batch": lambda k: k.tree_predict_batch(
            params.a, params.b, params.c, params.d, depth, X),
        "soft_loss_grad": lambda k: k.soft_loss_grad(
            params.a, params.b, params.c, params.d, alpha, X, U, nodes, dirs),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=4096)
    ap.add_argument("--depth", type=int, default=8)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    backends = available_backends()
    kernels = {name: get_kernels(name) for name in backends}
    workloads = build_workloads(args.samples, args.depth)

    print(f"workload sizes: {args.samples} samples, depth {args.depth}, "
          f"case2 QP (d = 17)")
    print(f"{'kernel':<20}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
          + ("" if len(backends) < 2 else f"{'speedup':>10}"))
    for name, call in workloads.items():
        times = [_time_call(lambda k=kernels[b]: call(k), args.reps)
                 for b in backends]
        row = f"{name:<20}" + "".join(f"{t * 1e3:>14.3f}" for t in times)
        if len(times) == 2:
            row += f"{times[1] / times[0]:>10.2f}"
        print(row)


if __name__ == "__main__":
    main()
