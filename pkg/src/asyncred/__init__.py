"""Asynchronous block-parallel RED reconstruction library.

Core pieces: block partitions (:mod:`.blocks`), linear forward models and
the least-squares fidelity (:mod:`.operators`), nonexpansive denoisers
(:mod:`.denoisers`), the composite operator and its convergence bounds
(:mod:`.red_core`), serial solvers (:mod:`.solvers`), the asynchronous
shared-memory engine and replay simulator (:mod:`.engine`), experiment
recipes (:mod:`.experiments`), and the verification suites (:mod:`.verify`).
A FastAPI service (:mod:`.service`) exposes runs, verification, and
benchmarks; the ``asyncred`` CLI is a thin client of that service.
"""

__version__ = "0.1.0"

from .blocks import GridPartition, Partition, make_uniform_partition
from .denoisers import (ConvolutionDenoiser, Denoiser, GainDenoiser,
                        IdentityDenoiser, TransformShrinkDenoiser)
from .engine import (DelayPolicy, SharedState, StalenessSchedule, WorkerReport,
                     delay_audit, memory_stress, run_async_bg, run_async_sg,
                     run_simulated)
from .operators import (BlockDiagonalGaussian, LeastSquaresFidelity,
                        LinearOperator, MeasurementPartition,
                        ParallelBeamRadon, PermutedColumnsOperator,
                        build_radon, lipschitz_estimate,
                        synthesize_measurements)
from .red_core import (BoundInputs, RedConfig, RedOperator, cocoercivity_check,
                       fixed_point_direct_solve, nu_estimate, step_size_bound,
                       theoretical_bound_bg, theoretical_bound_sg)
from .solvers import (DivergenceError, SolverBudget, Trace, bc_red, gm_red,
                      sg_red, sync_red)

__all__ = [
    "__version__",
    "Partition", "GridPartition", "make_uniform_partition",
    "LinearOperator", "BlockDiagonalGaussian", "ParallelBeamRadon",
    "PermutedColumnsOperator", "MeasurementPartition", "LeastSquaresFidelity",
    "build_radon", "lipschitz_estimate", "synthesize_measurements",
    "Denoiser", "IdentityDenoiser", "GainDenoiser", "ConvolutionDenoiser",
    "TransformShrinkDenoiser",
    "RedConfig", "RedOperator", "BoundInputs", "step_size_bound",
    "theoretical_bound_bg", "theoretical_bound_sg", "cocoercivity_check",
    "nu_estimate", "fixed_point_direct_solve",
    "Trace", "SolverBudget", "DivergenceError",
    "gm_red", "bc_red", "sync_red", "sg_red",
    "SharedState", "DelayPolicy", "WorkerReport", "StalenessSchedule",
    "run_async_bg", "run_async_sg", "run_simulated", "delay_audit",
    "memory_stress",
]
