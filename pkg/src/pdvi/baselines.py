"""Stochastic baselines driving the same objectives as the primal-dual solver.

Every step re-optimizes the local variables of the sampled batch at the
current global iterate, forms the batch-mean gradient in the global
variable and applies one of: plain SGD, SVI (natural-gradient blend toward
the conjugate coordinate update, constant or diminishing rate), Adam or
RMSProp. Step sizes may be given per global block.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, ConsensusProblem, check_finite, full_objective, global_gradient
from .solver import BatchSchedule, SolverAborted, TraceRecord, sample_batch

METHODS = ("sgd", "svi_constant", "svi_diminishing", "adam", "rmsprop")


@dataclass
class BaselineConfig:
    method: str
    schedule: BatchSchedule
    step: float | tuple = 0.1
    diminish: tuple | None = None  # (a, b): rate_t = a / (1 + b t)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9
    max_iters: int = 100
    trace_every: int = 1
    stop_grad_tol: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown baseline {self.method!r}")
        if np.any(np.asarray(self.step, float) <= 0):
            raise ConfigurationError("step must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam moment parameters must lie in [0, 1)")
        if self.diminish is None:
            self.diminish = (float(np.max(self.step)), 0.01)

    def rate(self, t: int) -> float:
        """Step multiplier at iteration ``t`` (1-based) for the SVI variants."""
        if self.method == "svi_diminishing":
            a, b = self.diminish
            return a / (1.0 + b * (t - 1))
        return float(np.max(self.step))


@dataclass
class BaselineState:
    lambda0: np.ndarray
    phi: np.ndarray
    t: int = 0
    m1: np.ndarray | None = None
    m2: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def lam(self):
        return self.lambda0[None, :]


def _steps(problem, step):
    step = np.asarray(step, float)
    if step.ndim == 0:
        return np.full(problem.d_lambda, float(step))
    return problem.partition.expand(step)


def baseline_step(problem: ConsensusProblem, config: BaselineConfig, state: BaselineState, S_t):
    """One baseline iteration on batch ``S_t``; mutates and returns ``state``."""
    oracle = problem.oracle
    S_t = np.asarray(S_t, dtype=np.intp)
    lam_S = np.broadcast_to(state.lambda0, (S_t.size, problem.d_lambda))
    phi_S = oracle.minimize_phi(S_t, state.phi[S_t], lam_S)
    if phi_S is None:
        raise ConfigurationError(f"{type(oracle).__name__} cannot re-optimize local variables")
    state.phi[S_t] = phi_S
    t = state.t + 1
    method = config.method
    if method.startswith("svi"):
        rate = config.rate(t)
        natural = getattr(oracle, "natural_update", None)
        new = natural(S_t, phi_S, state.lambda0, rate) if natural else None
        if new is None:
            g = oracle.grad(S_t, phi_S, lam_S)[1].mean(axis=0)
            new = state.lambda0 - rate * g
    else:
        g = oracle.grad(S_t, phi_S, lam_S)[1].mean(axis=0)
        step = _steps(problem, config.step)
        if method == "sgd":
            new = state.lambda0 - step * g
        elif method == "adam":
            if state.m1 is None:
                state.m1, state.m2 = np.zeros_like(g), np.zeros_like(g)
            state.m1 = config.beta1 * state.m1 + (1 - config.beta1) * g
            state.m2 = config.beta2 * state.m2 + (1 - config.beta2) * g**2
            mhat = state.m1 / (1 - config.beta1**t)
            vhat = state.m2 / (1 - config.beta2**t)
            new = state.lambda0 - step * mhat / (np.sqrt(vhat) + config.eps)
        else:
            if state.m2 is None:
                state.m2 = np.zeros_like(g)
            state.m2 = config.decay * state.m2 + (1 - config.decay) * g**2
            new = state.lambda0 - step * g / (np.sqrt(state.m2) + config.eps)
    state.lambda0 = check_finite("lambda0", new)
    state.t = t
    return state


def run_baseline(problem: ConsensusProblem, config: BaselineConfig, init_lambda0, init_phi=None):
    """Run a baseline; returns ``(state, trace)`` with the solver's trace schema."""
    lam0 = check_finite("lambda0", init_lambda0).reshape(-1).copy()
    phi = problem.oracle.initial_phi(lam0) if init_phi is None else np.array(init_phi, float)
    state = BaselineState(lam0, phi.reshape(problem.n, problem.d_phi))
    trace = []
    elapsed = 0.0
    for k in range(config.max_iters):
        tic = time.perf_counter()
        S_t = sample_batch(config.schedule, state.t + 1, problem.n)
        try:
            baseline_step(problem, config, state, S_t)
        except Exception as exc:
            raise SolverAborted(f"baseline step failed at t={state.t + 1}: {exc}",
                                state, trace) from exc
        elapsed += (time.perf_counter() - tic) * 1e3
        if state.t % config.trace_every == 0 or k == config.max_iters - 1:
            g = global_gradient(problem, state.phi, state.lambda0)
            rec = TraceRecord(state.t, full_objective(problem, state.phi, state.lambda0),
                              float(np.linalg.norm(g)), 0.0, elapsed)
            if not np.isfinite(rec.objective):
                raise SolverAborted(f"non-finite objective at t={state.t}", state, trace)
            trace.append(rec)
            if rec.grad_norm_global <= config.stop_grad_tol:
                break
    return state, trace

