"""Kernel backend selection.

The hot numeric paths ship twice: loop kernels compiled by numba (default
when numba imports cleanly) and vectorized plain-numpy fallbacks. Selection
happens once at import via the TREEMPC_BACKEND environment variable:

    TREEMPC_BACKEND=numba   force the jitted kernels (raise if unavailable)
    TREEMPC_BACKEND=numpy   force the fallback kernels
    unset / empty           numba when importable, else numpy with a warning

`benchmarks/backend_bench.py` compares the two paths head to head.
"""

import importlib
import os
import warnings

_ENV_VAR = "TREEMPC_BACKEND"


def available_backends():
    names = ["numpy"]
    try:
        importlib.import_module("numba")
        names.insert(0, "numba")
    except ImportError:
        pass
    return names


def get_kernels(backend):
    """Import and return the kernel module for an explicit backend name."""
    if backend == "numba":
        return importlib.import_module("treempc._kernels_numba")
    if backend == "numpy":
        return importlib.import_module("treempc._kernels_numpy")
    raise ValueError(f"unknown backend {backend!r}; expected 'numba' or 'numpy'")


def _select():
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            f"{_ENV_VAR}={choice!r} not understood; use 'numba' or 'numpy'")
    if choice == "numpy":
        return get_kernels("numpy")
    if choice == "numba":
        return get_kernels("numba")
    try:
        return get_kernels("numba")
    except ImportError:
        warnings.warn("numba unavailable, using pure-numpy kernels "
                      f"(set {_ENV_VAR}=numpy to silence)", stacklevel=2)
        return get_kernels("numpy")


kernels = _select()
BACKEND = kernels.BACKEND_NAME

qp_box_active_set = kernels.qp_box_active_set
qp_box_repeat = kernels.qp_box_repeat
tree_leaf_batch = kernels.tree_leaf_batch
tree_predict_one = kernels.tree_predict_one
tree_predict_batch = kernels.tree_predict_batch
tree_eval_repeat = kernels.tree_eval_repeat
leaf_weights_batch = kernels.leaf_weights_batch
soft_forward_batch = kernels.soft_forward_batch
soft_loss_grad = kernels.soft_loss_grad
