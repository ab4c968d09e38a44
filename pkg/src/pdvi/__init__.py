"""Mini-batch primal-dual solvers for consensus-constrained finite sums."""

from .core import (
    BlockPartition,
    ConfigurationError,
    ConsensusProblem,
    DimensionError,
    DomainError,
    ObjectiveOracle,
    PreconditionerSpec,
    SolverState,
    consensus_residual,
    full_objective,
    global_gradient,
)
from .solver import (
    BatchSchedule,
    SolveConfig,
    SolverAborted,
    TraceRecord,
    aggregate_global,
    default_preconditioner,
    oracle_update,
    run,
    sample_batch,
)
from .subsolver import InnerSolverConfig, InnerSolverDivergence, solve_local_al

__version__ = "0.1.0"
