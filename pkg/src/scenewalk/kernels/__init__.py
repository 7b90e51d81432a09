"""Backend dispatch for the numeric hot kernels.

Two interchangeable implementations exist for every kernel: vectorized
numpy (``reference``) and numba ``@njit`` loops (``jit``). Selection order:

* ``SCENEWALK_BACKEND=numpy``  -> force the pure-numpy path
* ``SCENEWALK_BACKEND=numba``  -> force numba (ImportError if missing)
* unset or ``auto``            -> numba when importable, else numpy

Matrix products are deliberately not twinned: both backends use BLAS via
``numpy`` (a naive loop matmul would only ever lose). ``scenewalk bench``
compares the two backends kernel by kernel.
"""

from __future__ import annotations

import os

from . import assignment, reference

_KERNEL_NAMES = (
    "layer_norm_fwd",
    "layer_norm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "log_softmax_fwd",
    "log_softmax_bwd",
    "gather_rows",
    "scatter_add_rows",
    "relu_fwd",
    "relu_bwd",
    "adam_step",
    "sgd_step",
)


class KernelOps:
    """Mutable namespace holding the active kernel implementations."""

    backend: str = "numpy"

    def use(self, backend: str) -> str:
        if backend in ("auto", ""):
            try:
                import numba  # noqa: F401

                backend = "numba"
            except ImportError:
                backend = "numpy"
        if backend == "numpy":
            src = reference
            self.solve_assignment = assignment.solve_assignment
        elif backend == "numba":
            from . import jit as src  # deferred: importing compiles nothing yet

            self.solve_assignment = assignment.compile_solver()
        else:
            raise ValueError(f"unknown kernel backend {backend!r}")
        for name in _KERNEL_NAMES:
            setattr(self, name, getattr(src, name))
        self.backend = backend
        return backend


ops = KernelOps()
ops.use(os.environ.get("SCENEWALK_BACKEND", "auto").lower())


def active_backend() -> str:
    return ops.backend
