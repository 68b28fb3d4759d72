"""Numerical laboratory for Ricci DeTurck flow and C0 stability of scalar-curvature lower bounds."""

import os as _os

# cap BLAS worker threads before numpy loads; RDT_LAB_THREADS defaults to one core
_threads = _os.environ.get("RDT_LAB_THREADS", "1")
if _threads.isdigit() and int(_threads) >= 1:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .curvature import CurvatureBundle, compute_curvature, deturck_field  # noqa: E402
from .flow import FlowConfig, FlowState, Trajectory, evolve  # noqa: E402
from .grid import Grid, MetricField, TensorField  # noqa: E402

__all__ = [
    "Grid",
    "TensorField",
    "MetricField",
    "CurvatureBundle",
    "compute_curvature",
    "deturck_field",
    "FlowConfig",
    "FlowState",
    "Trajectory",
    "evolve",
]
__version__ = "0.1.0"
