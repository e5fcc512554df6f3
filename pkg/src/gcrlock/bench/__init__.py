"""AVL-tree microbenchmark used to evaluate locks with and without restriction."""

from .avltree import AvlMap
from .workload import (
    RunMetrics,
    WorkloadConfig,
    calibrate_ncs_iters,
    non_critical_work,
    run_workload,
    unfairness,
)

__all__ = ["AvlMap", "RunMetrics", "WorkloadConfig", "calibrate_ncs_iters",
           "non_critical_work", "run_workload", "unfairness"]
