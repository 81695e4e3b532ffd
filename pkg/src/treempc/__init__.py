"""Oblique decision trees that approximate linear MPC control laws.

The pipeline: pose a constrained linear-quadratic regulation problem
(`MpcProblem`), label a grid of states with exact first moves from the
condensed QP (`generate_dataset`), fit a fixed-depth oblique tree with
affine leaf laws by smoothed-routing gradient descent (`train`), then
evaluate closed-loop behavior, an offline error bound and evaluation
speed (`evaluation`). Small problems can also be solved exactly by region
enumeration (`enumerate_explicit`) and compiled losslessly into a tree
(`tree_from_regions`).
"""

__version__ = "0.1.0"

from ._accel import BACKEND, available_backends
from .dataset import (Dataset, StateBox, export_csv, generate_dataset,
                      grid_states, label_states, load_csv, load_dataset,
                      random_states, sample_lattice, save_dataset, subsample)
from .errors import (AllInfeasible, ControllerFailure, Diverged,
                     NonConvergent, NotCovered, NotSeparable, QpInfeasible,
                     QpMaxIterations, TooLarge, TooManyPoints, TooShort,
                     TreeMpcError, ValidationError)
from .evaluation import (DisturbanceSpec, ErrorBoundReport,
                         ExplicitController, IssReport, SimResult, TimingRow,
                         TimingReport, TreeController, assemble_error_bound,
                         benchmark_timing, default_iss_starts,
                         error_bound_report, estimate_k_max, iss_probe,
                         lambda_metric, lambda_ratios, mpc_chain_timing,
                         simulate)
from .explicit import (RegionLaw, enumerate_explicit, eval_explicit,
                       regions_from_dicts, regions_to_dicts)
from .qp import (CondensedQp, MpcController, QpSolution, condense,
                 mpc_control, solve_qp)
from .system import (BUILTIN_BOXES, LtiSystem, MpcProblem, builtin_problem,
                     discrete_lyapunov, load_problem, save_problem)
from .training import (SoftTreeParams, TrainConfig, TrainReport, harden,
                       init_params, train)
from .tree import (ObliqueTree, estimate_max_jump, export_rules, leaf_paths,
                   lipschitz_max, tree_from_regions)

__all__ = [
    "__version__", "BACKEND", "available_backends",
    "Dataset", "StateBox", "export_csv", "generate_dataset", "grid_states",
    "label_states", "load_csv", "load_dataset", "random_states",
    "sample_lattice", "save_dataset", "subsample",
    "AllInfeasible", "ControllerFailure", "Diverged", "NonConvergent",
    "NotCovered", "NotSeparable", "QpInfeasible", "QpMaxIterations",
    "TooLarge", "TooManyPoints", "TooShort", "TreeMpcError",
    "ValidationError",
    "DisturbanceSpec", "ErrorBoundReport", "ExplicitController", "IssReport",
    "SimResult", "TimingRow", "TimingReport", "TreeController",
    "assemble_error_bound", "benchmark_timing", "default_iss_starts",
    "error_bound_report", "estimate_k_max", "iss_probe", "lambda_metric",
    "lambda_ratios", "mpc_chain_timing", "simulate",
    "RegionLaw", "enumerate_explicit", "eval_explicit", "regions_from_dicts",
    "regions_to_dicts",
    "CondensedQp", "MpcController", "QpSolution", "condense", "mpc_control",
    "solve_qp",
    "BUILTIN_BOXES", "LtiSystem", "MpcProblem", "builtin_problem",
    "discrete_lyapunov", "load_problem", "save_problem",
    "SoftTreeParams", "TrainConfig", "TrainReport", "harden", "init_params",
    "train",
    "ObliqueTree", "estimate_max_jump", "export_rules", "leaf_paths",
    "lipschitz_max", "tree_from_regions",
]
