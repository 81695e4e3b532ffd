"""Discrete-time LTI systems and finite-horizon MPC problem definitions.

Conventions: dynamics x+ = A x + B u with n states and m inputs. The MPC
problem regulates to the origin with stage cost x'Qx + u'Ru, terminal cost
x'Px, componentwise input bounds and optional componentwise state bounds.
Infinite bounds mean the component is unconstrained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NonConvergent, ValidationError

_SYM_TOL = 1e-9


def _as_matrix(x, rows, cols, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (rows, cols):
        raise ValidationError(f"{name} must have shape ({rows}, {cols}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def _check_symmetric_psd(M, name, definite=False):
    if not np.allclose(M, M.T, atol=_SYM_TOL):
        raise ValidationError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(0.5 * (M + M.T))
    floor = _SYM_TOL if definite else -_SYM_TOL
    if eigs.min() < floor:
        kind = "positive definite" if definite else "positive semidefinite"
        raise ValidationError(f"{name} must be {kind} (min eig {eigs.min():.3e})")


@dataclass(frozen=True)
class LtiSystem:
    """Discrete-time linear system x+ = A x + B u."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.A).shape[0]
        object.__setattr__(self, "A", _as_matrix(self.A, n, n, "A"))
        m = np.asarray(self.B).reshape(n, -1).shape[1]
        object.__setattr__(self, "B", _as_matrix(np.asarray(self.B).reshape(n, m), n, m, "B"))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def step(self, x, u, w=None):
        """One dynamics update, optionally with additive disturbance w."""
        x1 = self.A @ x + self.B @ u
        if w is not None:
            x1 = x1 + w
        return x1


@dataclass(frozen=True)
class MpcProblem:
    """Finite-horizon regulation problem over N input moves.

    Cost: sum_{k=0}^{N-1} [x(k)'Q x(k) + u(k)'R u(k)] + x(N)'P x(N),
    subject to u_min <= u(k) <= u_max and, where finite, x_min <= x(k) <= x_max
    for k = 0..N. Bounds are per-component; +-inf disables the component.
    """

    system: LtiSystem
    N: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    x_min: np.ndarray = None
    x_max: np.ndarray = None
    name: str = field(default="custom")

    def __post_init__(self):
        n, m = self.system.n, self.system.m
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 1):
            raise ValidationError(f"N must be a positive integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "Q", _as_matrix(self.Q, n, n, "Q"))
        object.__setattr__(self, "R", _as_matrix(self.R, m, m, "R"))
        object.__setattr__(self, "P", _as_matrix(self.P, n, n, "P"))
        _check_symmetric_psd(self.Q, "Q")
        _check_symmetric_psd(self.P, "P")
        _check_symmetric_psd(self.R, "R", definite=True)

        u_lo = np.asarray(self.u_min, dtype=np.float64).reshape(m)
        u_hi = np.asarray(self.u_max, dtype=np.float64).reshape(m)
        if np.any(np.isnan(u_lo)) or np.any(np.isnan(u_hi)):
            raise ValidationError("input bounds contain NaN")
        if not np.all(u_lo < u_hi):
            raise ValidationError("u_min must be strictly below u_max componentwise")
        object.__setattr__(self, "u_min", u_lo)
        object.__setattr__(self, "u_max", u_hi)

        x_lo = self.x_min if self.x_min is not None else np.full(n, -np.inf)
        x_hi = self.x_max if self.x_max is not None else np.full(n, np.inf)
        x_lo = np.asarray(x_lo, dtype=np.float64).reshape(n)
        x_hi = np.asarray(x_hi, dtype=np.float64).reshape(n)
        if np.any(np.isnan(x_lo)) or np.any(np.isnan(x_hi)):
            raise ValidationError("state bounds contain NaN")
        if not np.all(x_lo < x_hi):
            raise ValidationError("x_min must be strictly below x_max componentwise")
        object.__setattr__(self, "x_min", x_lo)
        object.__setattr__(self, "x_max", x_hi)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def m(self) -> int:
        return self.system.m

    @property
    def has_state_bounds(self) -> bool:
        return bool(np.any(np.isfinite(self.x_min)) or np.any(np.isfinite(self.x_max)))

    def clamp(self, u):
        """Project an input vector onto the box [u_min, u_max]."""
        return np.minimum(np.maximum(np.asarray(u, dtype=np.float64), self.u_min), self.u_max)

    def stage_cost(self, x, u):
        return float(x @ self.Q @ x + u @ self.R @ u)

    def rollout_cost(self, x0, u_seq):
        """Direct evaluation of the horizon cost for a given input sequence."""
        x = np.asarray(x0, dtype=np.float64)
        u_seq = np.asarray(u_seq, dtype=np.float64).reshape(self.N, self.m)
        total = 0.0
        for k in range(self.N):
            total += self.stage_cost(x, u_seq[k])
            x = self.system.step(x, u_seq[k])
        total += float(x @ self.P @ x)
        return total


def discrete_lyapunov(A, Q, tol=1e-10, max_iter=10_000):
    """Solve P = A' P A + Q for symmetric PSD P.

    Raises NonConvergent when the spectral radius of A is >= 1 (no bounded
    fixed point) or when the residual fails the tolerance.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    Q = _as_matrix(Q, n, n, "Q")
    _check_symmetric_psd(Q, "Q")
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho >= 1.0 - 1e-12:
        raise NonConvergent(f"spectral radius {rho:.6f} >= 1, iteration cannot contract")
    # scipy solves X = A X A' + Q; transpose A to match the P = A'PA + Q form.
    P = scipy.linalg.solve_discrete_lyapunov(A.T, Q)
    P = 0.5 * (P + P.T)
    residual = np.max(np.abs(P - (A.T @ P @ A + Q)))
    if not np.isfinite(residual) or residual > tol:
        raise NonConvergent(f"Lyapunov residual {residual:.3e} exceeds {tol:.1e} "
                            f"(iteration budget {max_iter})")
    return P


def _case1_problem():
    A = np.array([[0.7326, -0.0861],
                  [0.1722, 0.9909]])
    B = np.array([[0.0609],
                  [0.0064]])
    Q = np.eye(2)
    R = np.array([[0.01]])
    P = discrete_lyapunov(A, Q)
    return MpcProblem(system=LtiSystem(A, B), N=2, Q=Q, R=R, P=P,
                      u_min=[-2.0], u_max=[2.0], name="case1")


def _case2_problem():
    A = np.array([[0.4035, 0.3704, 0.2935, -0.7258],
                  [-0.2114, 0.6405, -0.6717, -0.0420],
                  [0.8368, 0.0175, -0.2806, 0.3808],
                  [-0.0724, 0.6001, 0.5552, 0.4919]])
    B = np.array([[1.6124], [0.4086], [-1.4512], [-0.6761]])
    Q = np.eye(4)
    R = np.array([[0.2]])
    P = np.eye(4)
    return MpcProblem(system=LtiSystem(A, B), N=17, Q=Q, R=R, P=P,
                      u_min=[-0.2], u_max=[0.2], name="case2")


# Default sampling boxes for the built-in problems (per-axis lo/hi).
BUILTIN_BOXES = {
    "case1": (np.full(2, -1.5), np.full(2, 1.5)),
    "case2": (np.full(4, -1.0), np.full(4, 1.0)),
}


def builtin_problem(name: str) -> MpcProblem:
    """Return one of the built-in benchmark problems ("case1" or "case2")."""
    if name == "case1":
        return _case1_problem()
    if name == "case2":
        return _case2_problem()
    raise ValidationError(f"unknown built-in problem {name!r}")


def _bound_to_json(v):
    out = []
    for x in np.asarray(v, dtype=np.float64):
        if np.isposinf(x):
            out.append("inf")
        elif np.isneginf(x):
            out.append("-inf")
        else:
            out.append(float(x))
    return out


def _bound_from_json(v, length, name):
    arr = np.empty(length)
    seq = v if isinstance(v, (list, tuple)) else [v] * length
    if len(seq) != length:
        raise ValidationError(f"{name} must have {length} entries")
    for i, x in enumerate(seq):
        if x == "inf":
            arr[i] = np.inf
        elif x == "-inf":
            arr[i] = -np.inf
        else:
            arr[i] = float(x)
    return arr


def problem_to_dict(problem: MpcProblem) -> dict:
    return {
        "name": problem.name,
        "A": problem.system.A.tolist(),
        "B": problem.system.B.tolist(),
        "N": problem.N,
        "Q": problem.Q.tolist(),
        "R": problem.R.tolist(),
        "P": problem.P.tolist(),
        "u_min": _bound_to_json(problem.u_min),
        "u_max": _bound_to_json(problem.u_max),
        "x_min": _bound_to_json(problem.x_min),
        "x_max": _bound_to_json(problem.x_max),
    }


def problem_from_dict(data: dict) -> MpcProblem:
    try:
        A = np.asarray(data["A"], dtype=np.float64)
        n = A.shape[0]
        B = np.asarray(data["B"], dtype=np.float64).reshape(n, -1)
        m = B.shape[1]
        system = LtiSystem(A, B)
        P = data.get("P", "lyapunov")
        if isinstance(P, str):
            if P != "lyapunov":
                raise ValidationError(f"P must be a matrix or 'lyapunov', got {P!r}")
            P = discrete_lyapunov(A, np.asarray(data["Q"], dtype=np.float64))
        kwargs = {}
        if "x_min" in data:
            kwargs["x_min"] = _bound_from_json(data["x_min"], n, "x_min")
        if "x_max" in data:
            kwargs["x_max"] = _bound_from_json(data["x_max"], n, "x_max")
        return MpcProblem(
            system=system,
            N=int(data["N"]),
            Q=np.asarray(data["Q"], dtype=np.float64),
            R=np.asarray(data["R"], dtype=np.float64),
            P=P,
            u_min=_bound_from_json(data["u_min"], m, "u_min"),
            u_max=_bound_from_json(data["u_max"], m, "u_max"),
            name=str(data.get("name", "custom")),
            **kwargs,
        )
    except KeyError as exc:
        raise ValidationError(f"problem definition missing field {exc}") from exc


def load_problem(spec: str) -> MpcProblem:
    """Load a problem by built-in name or from a JSON file path."""
    if spec in ("case1", "case2"):
        return builtin_problem(spec)
    with open(spec, "r", encoding="utf-8") as fh:
        return problem_from_dict(json.load(fh))


def save_problem(problem: MpcProblem, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(problem_to_dict(problem), fh, indent=2)
        fh.write("\n")
