"""Inexact solves of the per-sample augmented-Lagrangian subproblem.

For a batch of samples the subproblem is

    min_{phi, lam}  f_i(phi, lam) + <mu_i, lam - lam0> + 1/2 ||lam - lam0||^2_D

with ``D`` the diagonal block penalty. Every sample is solved independently;
the batch is only a vectorization device, so the result for sample ``i`` never
depends on which other samples share its batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, ObjectiveOracle, PreconditionerSpec

log = logging.getLogger(__name__)

METHODS = ("closed_form", "block_coordinate_descent", "gradient_descent")
LINE_SEARCHES = ("fixed_step", "backtracking")


class InnerSolverDivergence(RuntimeError):
    """A local iterate became non-finite."""

    def __init__(self, message, last_iterate):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass
class InnerSolverConfig:
    method: str = "block_coordinate_descent"
    inner_tol: float = 1e-6
    max_inner_iters: int = 200
    line_search: str = "backtracking"
    step: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown inner method {self.method!r}")
        if self.line_search not in LINE_SEARCHES:
            raise ConfigurationError(f"unknown line search {self.line_search!r}")
        if not self.inner_tol > 0:
            raise ConfigurationError("inner_tol must be positive")
        if self.max_inner_iters < 1:
            raise ConfigurationError("max_inner_iters must be >= 1")


@dataclass
class InnerReport:
    iterations: np.ndarray
    grad_phi_norm: np.ndarray
    grad_lambda_norm: np.ndarray
    converged: np.ndarray
    fallbacks: int = 0
    notes: list = field(default_factory=list)

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


class LocalAL:
    """The local augmented Lagrangian for a batch of samples."""

    def __init__(self, oracle: ObjectiveOracle, idx, mu, lam0, penalty):
        self.oracle = oracle
        self.idx = np.asarray(idx, dtype=np.intp)
        self.mu = np.asarray(mu, dtype=float)
        self.lam0 = np.asarray(lam0, dtype=float)
        self.penalty = np.asarray(penalty, dtype=float)

    def subset(self, rows) -> "LocalAL":
        lam0 = self.lam0 if self.lam0.ndim == 1 else self.lam0[rows]
        return LocalAL(self.oracle, self.idx[rows], self.mu[rows], lam0, self.penalty)

    def value(self, phi, lam) -> np.ndarray:
        diff = lam - self.lam0
        return (
            self.oracle.value(self.idx, phi, lam)
            + np.sum(self.mu * diff, axis=1)
            + 0.5 * np.sum(self.penalty * diff**2, axis=1)
        )

    def grad(self, phi, lam):
        gphi, glam = self.oracle.grad(self.idx, phi, lam)
        return gphi, glam + self.mu + self.penalty * (lam - self.lam0)


def _norms(gphi, glam):
    return np.linalg.norm(gphi, axis=1), np.linalg.norm(glam, axis=1)


def _check_finite(phi, lam, last):
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(lam))):
        raise InnerSolverDivergence("non-finite local iterate", last)


def _trial_values(al: LocalAL, rows, tp, tl):
    """AL values at trial points; rows with non-finite entries get ``inf``."""
    fin = np.all(np.isfinite(tp), axis=1) & np.all(np.isfinite(tl), axis=1)
    val = np.full(rows.size, np.inf)
    if fin.any():
        with np.errstate(over="ignore", invalid="ignore"):
            val[fin] = al.subset(rows[fin]).value(tp[fin], tl[fin])
    return val


def _backtrack(al: LocalAL, phi, lam, which, sl, g, step0, fixed):
    """Gradient step on one block with per-row Armijo backtracking.

    Rows whose line search fails keep their current values.
    Returns (phi, lam, n_failed).
    """
    m = phi.shape[0]
    base = al.value(phi, lam)
    gsq = np.sum(g**2, axis=1)
    step = np.full(m, float(step0))
    new_phi, new_lam = phi.copy(), lam.copy()
    pending = gsq > 0
    for _ in range(1 if fixed else 60):
        if not pending.any():
            break
        rows = np.flatnonzero(pending)
        tp, tl = phi[rows].copy(), lam[rows].copy()
        if which == "phi":
            tp = tp - step[rows, None] * g[rows]
        else:
            tl[:, sl] = tl[:, sl] - step[rows, None] * g[rows]
        val = _trial_values(al, rows, tp, tl)
        ok = np.isfinite(val) & (val <= base[rows] - 0.5 * step[rows] * gsq[rows])
        if fixed:
            ok = np.isfinite(val) & (val <= base[rows] + 1e-12)
        good = rows[ok]
        new_phi[good], new_lam[good] = tp[ok], tl[ok]
        pending[good] = False
        step[rows[~ok]] *= 0.5
    return new_phi, new_lam, int(pending.sum())


def _block_step_size(al: LocalAL, block, lam, default):
    oracle = al.oracle
    if block == "phi":
        L = oracle.lipschitz_phi(lam)
        return 1.0 / L if L else default
    L = oracle.lipschitz_estimates(lam)
    if L is None:
        return default
    pen = al.penalty[oracle.partition.slices()[block]].max()
    return 1.0 / (float(L[block]) + pen)


def coordinate_descent_step(al: LocalAL, phi, lam, config=None, block_order=None):
    """One sweep of block coordinate descent over (phi, lambda-blocks).

    Each block is minimized exactly when the oracle provides a block
    minimizer; otherwise a line-searched gradient step is taken. The AL
    value never increases.

    Returns ``(phi, lam, n_fallbacks)``.
    """
    config = config or InnerSolverConfig()
    oracle = al.oracle
    slices = oracle.partition.slices()
    if block_order is None:
        block_order = (["phi"] if oracle.d_phi > 0 else []) + list(range(len(slices)))
    fallbacks = 0
    fixed = config.line_search == "fixed_step"
    for block in block_order:
        if block == "phi" and oracle.d_phi == 0:
            continue
        out = oracle.block_minimize(block, al.idx, phi, lam, al.mu, al.lam0, al.penalty)
        if out is not None:
            if block == "phi":
                phi = out
            else:
                lam = out
            continue
        gphi, glam = al.grad(phi, lam)
        if block == "phi":
            g, sl = gphi, None
        else:
            sl = slices[block]
            g = glam[:, sl]
        step0 = config.step if fixed else _block_step_size(al, block, lam, config.step)
        phi, lam, failed = _backtrack(al, phi, lam, block, sl, g, step0, fixed)
        fallbacks += failed
    return phi, lam, fallbacks


def _gradient_step(al: LocalAL, phi, lam, step, config):
    gphi, glam = al.grad(phi, lam)
    base = al.value(phi, lam)
    gsq = np.sum(gphi**2, axis=1) + np.sum(glam**2, axis=1)
    step = step.copy()
    new_phi, new_lam = phi.copy(), lam.copy()
    pending = gsq > 0
    fixed = config.line_search == "fixed_step"
    for _ in range(1 if fixed else 60):
        if not pending.any():
            break
        rows = np.flatnonzero(pending)
        with np.errstate(over="ignore", invalid="ignore"):
            tp = phi[rows] - step[rows, None] * gphi[rows]
            tl = lam[rows] - step[rows, None] * glam[rows]
        if fixed:
            # a fixed step is taken as is; non-finite results surface as divergence
            new_phi[rows], new_lam[rows] = tp, tl
            pending[rows] = False
            break
        val = _trial_values(al, rows, tp, tl)
        ok = np.isfinite(val) & (val <= base[rows] - 0.5 * step[rows] * gsq[rows])
        good = rows[ok]
        new_phi[good], new_lam[good] = tp[ok], tl[ok]
        pending[good] = False
        step[rows[~ok]] *= 0.5
    if not fixed:
        # let the step grow again on rows that accepted at first try
        step = np.minimum(step * 2.0, 1e12)
    return new_phi, new_lam, step, int(pending.sum())


def solve_local_al(oracle: ObjectiveOracle, idx, mu, lambda0, precond, init, config=None):
    """Approximately minimize the local augmented Lagrangian for samples ``idx``.

    Parameters
    ----------
    oracle : ObjectiveOracle
    idx : int or array of int
        Sample indices.
    mu : ndarray, shape (m, d_lambda)
        Dual variables of the samples.
    lambda0 : ndarray, shape (d_lambda,)
        Current global iterate.
    precond : PreconditionerSpec or ndarray
        Block step sizes, or directly the per-coordinate penalty diagonal.
    init : tuple of ndarray
        Warm start ``(phi, lam)``, shapes ``(m, d_phi)`` and ``(m, d_lambda)``.
    config : InnerSolverConfig

    Returns
    -------
    phi, lam : ndarray
    report : InnerReport
        Iterations, final stationarity norms and a per-sample convergence flag.
        Samples that exhaust ``max_inner_iters`` come back flagged rather than
        raising; non-finite iterates raise :class:`InnerSolverDivergence`.
    """
    config = config or InnerSolverConfig()
    scalar = np.ndim(idx) == 0
    idx = np.atleast_1d(np.asarray(idx, dtype=np.intp))
    m = idx.size
    if isinstance(precond, PreconditionerSpec):
        penalty = precond.penalty(oracle.partition)
    else:
        penalty = np.asarray(precond, dtype=float)
    mu = np.asarray(mu, dtype=float).reshape(m, oracle.d_lambda)
    lambda0 = np.asarray(lambda0, dtype=float)
    phi = np.array(init[0], dtype=float).reshape(m, oracle.d_phi)
    lam = np.array(init[1], dtype=float).reshape(m, oracle.d_lambda)
    al = LocalAL(oracle, idx, mu, lambda0, penalty)
    iters = np.zeros(m, dtype=int)
    fallbacks = 0

    if config.method == "closed_form":
        out = oracle.al_closed_form(idx, mu, lambda0, penalty)
        if out is None:
            raise ConfigurationError(
                f"{type(oracle).__name__} has no closed-form local solve"
            )
        phi, lam = out
        _check_finite(phi, lam, (phi, lam))
        iters[:] = 1
        gphi, glam = al.grad(phi, lam)
        gp, gl = _norms(gphi, glam)
        report = InnerReport(iters, gp, gl, np.ones(m, bool))
        return _maybe_scalar(phi, lam, report, scalar)

    gp, gl = _norms(*al.grad(phi, lam))
    active = np.flatnonzero((gp > config.inner_tol) | (gl > config.inner_tol))
    steps = np.full(m, float(config.step))
    while active.size:
        sub = al.subset(active)
        p, l = phi[active], lam[active]
        if config.method == "block_coordinate_descent":
            np_, nl, fb = coordinate_descent_step(sub, p, l, config)
        else:
            np_, nl, steps[active], fb = _gradient_step(sub, p, l, steps[active], config)
        _check_finite(np_, nl, (phi.copy(), lam.copy()))
        fallbacks += fb
        phi[active], lam[active] = np_, nl
        iters[active] += 1
        gp[active], gl[active] = _norms(*sub.grad(np_, nl))
        still = (gp[active] > config.inner_tol) | (gl[active] > config.inner_tol)
        still &= iters[active] < config.max_inner_iters
        active = active[still]

    converged = (gp <= config.inner_tol) & (gl <= config.inner_tol)
    report = InnerReport(iters, gp, gl, converged, fallbacks)
    if not report.all_converged:
        log.debug("%d of %d local solves stopped above tolerance", (~converged).sum(), m)
    return _maybe_scalar(phi, lam, report, scalar)


def _maybe_scalar(phi, lam, report, scalar):
    if scalar:
        return phi[0], lam[0], report
    return phi, lam, report
