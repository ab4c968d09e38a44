"""Mini-batch primal-dual loop with optional block preconditioning.

Each iteration samples a batch ``S_t``, solves the local augmented
Lagrangian of every sample in the batch (warm-started from its previous
iterate), takes the dual step ``mu_i += D (lam_i - lam0)`` and then updates
the drift accumulator ``h`` and the global iterate::

    h      <- h + (1/n) sum_{i in S_t} (lam_i - lam0_prev)
    lam0   <- mean_{i in S_t} lam_i + h

With one shared step size this is PD-VI; block step sizes give P2D-VI.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    ConsensusProblem,
    PreconditionerSpec,
    SolverState,
    consensus_residual,
    full_objective,
    global_gradient,
)
from .subsolver import InnerReport, InnerSolverConfig, solve_local_al

log = logging.getLogger(__name__)

SCHEDULE_MODES = ("uniform_without_replacement", "fixed_partition", "custom_sequence")
TRACE_COLUMNS = ("t", "objective", "grad_norm_global", "consensus_residual", "wallclock_ms")


class SolverAborted(RuntimeError):
    """A run stopped on an oracle or inner-solver error; the partial trace is kept."""

    def __init__(self, message, state, trace):
        super().__init__(message)
        self.state = state
        self.trace = trace


@dataclass
class BatchSchedule:
    mode: str = "uniform_without_replacement"
    batch_size: int = 1
    partition_assignment: np.ndarray | None = None
    sequence: Sequence | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise ConfigurationError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "fixed_partition":
            if self.partition_assignment is None:
                raise ConfigurationError("fixed_partition needs partition_assignment")
            assign = np.asarray(self.partition_assignment)
            self._batches = [np.flatnonzero(assign == b) for b in np.unique(assign)]
        elif self.mode == "custom_sequence":
            if not self.sequence:
                raise ConfigurationError("custom_sequence needs a non-empty sequence")
            self._batches = [np.asarray(b, dtype=np.intp) for b in self.sequence]
        elif self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")

    @classmethod
    def fixed(cls, batches, seed=0) -> "BatchSchedule":
        return cls(mode="custom_sequence", sequence=list(batches),
                   batch_size=max(len(b) for b in batches), seed=seed)


def sample_batch(schedule: BatchSchedule, t: int, n: int) -> np.ndarray:
    """Index set used at iteration ``t`` (1-based), deterministic in ``(seed, t)``."""
    if schedule.mode == "uniform_without_replacement":
        m = schedule.batch_size
        if m > n:
            raise ConfigurationError(f"batch size {m} exceeds sample count {n}")
        if m == n:
            return np.arange(n)
        rng = np.random.default_rng([schedule.seed, t])
        return np.sort(rng.choice(n, size=m, replace=False))
    batches = schedule._batches
    return np.sort(batches[(t - 1) % len(batches)])


@dataclass
class SolveConfig:
    preconditioner: PreconditionerSpec
    schedule: BatchSchedule
    max_iters: int = 100
    inner: InnerSolverConfig = field(default_factory=InnerSolverConfig)
    stop_grad_tol: float = 0.0
    stop_objective: float | None = None  # stop once a traced objective is at or below this
    trace_every: int = 1
    threads: int | None = None
    check_invariants: bool = False

    def __post_init__(self):
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be non-negative")
        if self.stop_grad_tol < 0:
            raise ConfigurationError("stop_grad_tol must be non-negative")
        if self.trace_every < 1:
            raise ConfigurationError("trace_every must be >= 1")
        if self.threads is None:
            self.threads = int(os.environ.get("PDVI_THREADS", "1") or 1)


@dataclass
class TraceRecord:
    t: int
    objective: float
    grad_norm_global: float
    consensus_residual: float
    wallclock_ms: float

    def as_dict(self) -> dict:
        return asdict(self)


def default_preconditioner(lipschitz, c=0.5):
    """Block step sizes ``eta_j = c / L_j``.

    Returns the PreconditionerSpec and ``sum_j eta_j^2 L_j^2`` (equal to ``B c^2``) for the
    caller to compare against its admissibility budget.
    """
    L = np.asarray(lipschitz, dtype=float).reshape(-1)
    if L.size == 0 or np.any(~np.isfinite(L)) or np.any(L <= 0):
        raise ConfigurationError(f"Lipschitz estimates must be positive, got {L}")
    etas = c / L
    return PreconditionerSpec(tuple(etas)), float(np.sum(etas**2 * L**2))


def oracle_update(oracle, idx, lambda0_prev, mu_prev, precond, inner, init):
    """Local primal solve followed by the dual step for samples ``idx``.

    Returns ``(phi, lam, mu, report)``.
    """
    penalty = precond.penalty(oracle.partition) if isinstance(precond, PreconditionerSpec) \
        else np.asarray(precond, float)
    phi, lam, report = solve_local_al(oracle, idx, mu_prev, lambda0_prev, penalty, init, inner)
    mu = mu_prev + penalty * (lam - lambda0_prev)
    return phi, lam, mu, report


def aggregate_global(state: SolverState, S_t, lambda0_prev, n: int):
    """Drift and global updates from the freshly updated local copies in ``S_t``."""
    S_t = np.asarray(S_t, dtype=np.intp)
    if S_t.size == 0:
        raise ConfigurationError("empty batch")
    lam_S = state.lam[S_t]
    h_new = state.h + np.sum(lam_S - lambda0_prev, axis=0) / n
    lambda0_new = lam_S.mean(axis=0) + h_new
    return h_new, lambda0_new


def _merge_reports(reports):
    return InnerReport(
        np.concatenate([r.iterations for r in reports]),
        np.concatenate([r.grad_phi_norm for r in reports]),
        np.concatenate([r.grad_lambda_norm for r in reports]),
        np.concatenate([r.converged for r in reports]),
        sum(r.fallbacks for r in reports),
    )


def _local_updates(problem, state, S_t, config, penalty, pool):
    oracle = problem.oracle
    mu_prev = state.mu[S_t]
    init = (state.phi[S_t], state.lam[S_t])
    if pool is None or len(S_t) < 2:
        return oracle_update(oracle, S_t, state.lambda0, mu_prev, penalty, config.inner, init)
    chunks = np.array_split(np.arange(len(S_t)), config.threads)
    futures = [
        pool.submit(oracle_update, oracle, S_t[c], state.lambda0, mu_prev[c], penalty,
                    config.inner, (init[0][c], init[1][c]))
        for c in chunks if len(c)
    ]
    parts = [f.result() for f in futures]
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]), _merge_reports([p[3] for p in parts]))


def trace_record(problem, state, elapsed_ms) -> TraceRecord:
    g = global_gradient(problem, state.phi, state.lambda0)
    return TraceRecord(
        t=state.t,
        objective=full_objective(problem, state.phi, state.lambda0),
        grad_norm_global=float(np.linalg.norm(g)),
        consensus_residual=consensus_residual(state),
        wallclock_ms=elapsed_ms,
    )


def run(problem: ConsensusProblem, config: SolveConfig, init_lambda0, init_phi=None,
        callback: Callable | None = None, state: SolverState | None = None):
    """Run the primal-dual loop for ``config.max_iters`` iterations.

    Parameters
    ----------
    problem : ConsensusProblem
    config : SolveConfig
    init_lambda0 : array_like, shape (d_lambda,)
    init_phi : array_like, optional
        Starting local variables; defaults to the oracle's ``initial_phi``.
    callback : callable, optional
        Called as ``callback(t, S_t, state, report)`` after every iteration.
    state : SolverState, optional
        Resume from this state instead of initializing.

    Returns
    -------
    state : SolverState
        Final iterate. ``state.meta`` holds run statistics: largest dual
        residual, number of flagged (unconverged) local solves, and whether
        the run stopped on the gradient or objective target.
    trace : list of TraceRecord
    """
    if state is None:
        state = SolverState.initial(problem, init_lambda0, init_phi)
    state.check_dims(problem)
    penalty = config.preconditioner.penalty(problem.partition)
    n = problem.n
    trace: list[TraceRecord] = []
    stats = {"max_dual_residual": 0.0, "flagged_local_solves": 0,
             "inner_iterations": 0, "stopped_early": False}
    state.meta.update(stats)
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    elapsed = 0.0
    try:
        for _ in range(config.max_iters):
            tic = time.perf_counter()
            t = state.t + 1
            S_t = sample_batch(config.schedule, t, n)
            if config.check_invariants:
                others = np.setdiff1d(np.arange(n), S_t)
                before = (state.phi[others].copy(), state.lam[others].copy(),
                          state.mu[others].copy())
            try:
                phi, lam, mu, report = _local_updates(problem, state, S_t, config, penalty, pool)
            except Exception as exc:
                raise SolverAborted(f"local update failed at t={t}: {exc}", state, trace) from exc
            lambda0_prev = state.lambda0
            state.phi[S_t], state.lam[S_t], state.mu[S_t] = phi, lam, mu
            state.h, state.lambda0 = aggregate_global(state, S_t, lambda0_prev, n)
            state.t = t
            elapsed += (time.perf_counter() - tic) * 1e3

            meta = state.meta
            meta["max_dual_residual"] = max(meta["max_dual_residual"],
                                            float(report.grad_lambda_norm.max()))
            meta["flagged_local_solves"] += int((~report.converged).sum())
            meta["inner_iterations"] += int(report.iterations.sum())
            if config.check_invariants:
                _check_iteration(problem, state, S_t, others, before)
            if callback is not None:
                callback(t, S_t, state, report)
            last = _ == config.max_iters - 1
            if t % config.trace_every == 0 or last:
                rec = trace_record(problem, state, elapsed)
                if not (np.isfinite(rec.objective) and np.isfinite(rec.grad_norm_global)):
                    raise SolverAborted(f"non-finite objective at t={t}", state, trace)
                trace.append(rec)
                if rec.grad_norm_global <= config.stop_grad_tol or (
                        config.stop_objective is not None and rec.objective <= config.stop_objective):
                    meta["stopped_early"] = True
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    return state, trace


def _check_iteration(problem, state, S_t, others, before):
    state.check_dims(problem)
    gamma = state.lam[S_t].mean(axis=0)
    if not np.allclose(state.lambda0 - state.h, gamma, rtol=1e-12, atol=1e-12):
        raise AssertionError("aggregation identity violated")
    for name, old in zip(("phi", "lam", "mu"), before):
        if not np.array_equal(getattr(state, name)[others], old):
            raise AssertionError(f"{name} of an unsampled index changed")
