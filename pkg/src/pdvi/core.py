"""Consensus-constrained finite-sum problems.

The problem ``min (1/n) sum_i f_i(phi_i, lambda)`` is split into per-sample
copies ``lambda_i`` tied to a global ``lambda_0`` by equality constraints.
This module holds the shared data model: the block partition of the global
variable, the solver state and the oracle interface every objective
implements.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DomainError(ValueError):
    """An input lies outside an objective's domain."""

    def __init__(self, field_name: str, message: str = "non-finite values"):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def check_finite(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(name)
    return arr


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous, ordered split of the global vector into blocks."""

    block_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.block_dims)
        if not dims or any(d < 1 for d in dims):
            raise ConfigurationError(f"block dimensions must be >= 1, got {dims}")
        object.__setattr__(self, "block_dims", dims)

    @property
    def total(self) -> int:
        return sum(self.block_dims)

    @property
    def n_blocks(self) -> int:
        return len(self.block_dims)

    def slices(self) -> list[slice]:
        bounds = np.concatenate([[0], np.cumsum(self.block_dims)])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def expand(self, per_block: Sequence[float]) -> np.ndarray:
        """Repeat one value per block into a per-coordinate vector."""
        per_block = np.asarray(per_block, dtype=float)
        if per_block.shape != (self.n_blocks,):
            raise DimensionError(
                f"expected {self.n_blocks} block values, got shape {per_block.shape}"
            )
        return np.repeat(per_block, self.block_dims)

    def block_norms(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        return np.array([np.linalg.norm(vec[..., s]) for s in self.slices()])


@dataclass(frozen=True)
class PreconditionerSpec:
    """Block step sizes ``eta_1..eta_B``; the penalty matrix is blkdiag(1/eta_j I).

    A single-element ``etas`` together with a one-block partition, or all
    entries equal, is the unpreconditioned (uniform step) case.
    """

    etas: tuple[float, ...]

    def __post_init__(self):
        etas = tuple(float(e) for e in np.atleast_1d(self.etas))
        if not etas or any(not np.isfinite(e) or e <= 0 for e in etas):
            raise ConfigurationError(f"block step sizes must be positive, got {etas}")
        object.__setattr__(self, "etas", etas)

    @classmethod
    def uniform(cls, eta: float, n_blocks: int) -> "PreconditionerSpec":
        return cls((float(eta),) * n_blocks)

    @property
    def is_uniform(self) -> bool:
        return len(set(self.etas)) == 1

    def penalty(self, partition: BlockPartition) -> np.ndarray:
        """Diagonal of D_eta as a per-coordinate vector."""
        if len(self.etas) != partition.n_blocks:
            raise DimensionError(
                f"{len(self.etas)} step sizes for {partition.n_blocks} blocks"
            )
        return partition.expand(1.0 / np.asarray(self.etas))


class ObjectiveOracle:
    """Per-sample objective ``f_i(phi_i, lambda)`` with a vectorized interface.

    All methods take an index array ``idx`` of shape ``(m,)`` and stacked
    arguments ``phi`` of shape ``(m, d_phi)`` and ``lam`` of shape
    ``(m, d_lambda)``. Implementations must be pure: identical inputs give
    identical outputs.

    Subclasses set ``n``, ``d_phi`` and ``partition`` and implement
    :meth:`value` and :meth:`grad`. The remaining hooks are optional and
    let the local solver take exact block steps.
    """

    n: int
    d_phi: int
    partition: BlockPartition

    @property
    def d_lambda(self) -> int:
        return self.partition.total

    def value(self, idx, phi, lam) -> np.ndarray:
        raise NotImplementedError

    def grad(self, idx, phi, lam) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(grad_phi, grad_lambda)`` stacked over ``idx``."""
        raise NotImplementedError

    # single-sample conveniences
    def eval(self, i: int, phi_i, lam) -> float:
        phi_i, lam = self._single(phi_i, lam)
        return float(self.value(np.array([i]), phi_i, lam)[0])

    def grad_phi(self, i: int, phi_i, lam) -> np.ndarray:
        phi_i, lam = self._single(phi_i, lam)
        return self.grad(np.array([i]), phi_i, lam)[0][0]

    def grad_lambda(self, i: int, phi_i, lam) -> np.ndarray:
        phi_i, lam = self._single(phi_i, lam)
        return self.grad(np.array([i]), phi_i, lam)[1][0]

    def _single(self, phi_i, lam):
        phi_i = check_finite("phi", np.reshape(phi_i, (1, self.d_phi)))
        lam = check_finite("lambda", np.reshape(lam, (1, self.d_lambda)))
        return phi_i, lam

    def check_inputs(self, idx, phi, lam):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= self.n)):
            raise DomainError("index", f"indices must lie in [0, {self.n})")
        phi = check_finite("phi", phi)
        lam = check_finite("lambda", lam)
        if phi.shape != (idx.size, self.d_phi):
            raise DimensionError(f"phi has shape {phi.shape}, want {(idx.size, self.d_phi)}")
        if lam.shape != (idx.size, self.d_lambda):
            raise DimensionError(
                f"lambda has shape {lam.shape}, want {(idx.size, self.d_lambda)}"
            )
        return idx, phi, lam

    def initial_phi(self, lambda0) -> np.ndarray:
        """Starting local variables for every sample given the global start."""
        return np.zeros((self.n, self.d_phi))

    def minimize_phi(self, idx, phi, lam) -> np.ndarray | None:
        """Exact (or inner-tolerance) minimizer over phi at fixed lambda.

        Returns ``None`` when the objective has no specialised routine.
        """
        if self.d_phi == 0:
            return np.zeros((np.asarray(idx).size, 0))
        return None

    def block_minimize(self, block, idx, phi, lam, mu, lam0, penalty):
        """Exactly minimize the local augmented Lagrangian over one block.

        ``block`` is ``"phi"`` or an integer global block index. Returns the
        updated ``phi`` or ``lam`` array, or ``None`` if unsupported.
        """
        return None

    def al_closed_form(self, idx, mu, lam0, penalty):
        """Exact joint minimizer ``(phi, lam)`` of the local augmented
        Lagrangian, or ``None`` when no closed form exists."""
        return None

    def lipschitz_estimates(self, lam=None) -> np.ndarray | None:
        """Per-global-block smoothness constants, or ``None`` if unavailable."""
        return None

    def lipschitz_phi(self, lam=None) -> float | None:
        return None


@dataclass
class ConsensusProblem:
    oracle: ObjectiveOracle

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("need at least one sample")
        if self.d_phi < 0:
            raise ConfigurationError("d_phi must be non-negative")

    @property
    def n(self) -> int:
        return self.oracle.n

    @property
    def d_phi(self) -> int:
        return self.oracle.d_phi

    @property
    def partition(self) -> BlockPartition:
        return self.oracle.partition

    @property
    def d_lambda(self) -> int:
        return self.partition.total


@dataclass
class SolverState:
    """Iterates of the primal-dual loop.

    Per-sample quantities are stored as rows of ``phi``, ``lam`` and ``mu``.
    """

    lambda0: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    h: np.ndarray
    t: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, problem: ConsensusProblem, lambda0, phi0=None) -> "SolverState":
        lambda0 = check_finite("lambda0", lambda0).reshape(-1)
        if lambda0.shape != (problem.d_lambda,):
            raise DimensionError(
                f"lambda0 has {lambda0.size} entries, want {problem.d_lambda}"
            )
        if phi0 is None:
            phi0 = problem.oracle.initial_phi(lambda0)
        phi0 = check_finite("phi0", phi0).reshape(problem.n, problem.d_phi)
        return cls(
            lambda0=lambda0.copy(),
            phi=phi0.copy(),
            lam=np.tile(lambda0, (problem.n, 1)),
            mu=np.zeros((problem.n, problem.d_lambda)),
            h=np.zeros(problem.d_lambda),
            t=0,
        )

    def copy(self) -> "SolverState":
        return SolverState(
            self.lambda0.copy(), self.phi.copy(), self.lam.copy(),
            self.mu.copy(), self.h.copy(), self.t, dict(self.meta),
        )

    def check_dims(self, problem: ConsensusProblem):
        n, dp, dl = problem.n, problem.d_phi, problem.d_lambda
        expected = {
            "lambda0": (dl,), "phi": (n, dp), "lam": (n, dl), "mu": (n, dl), "h": (dl,)
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"state.{name} has shape {got}, want {shape}")


def full_objective(problem: ConsensusProblem, phi, lam) -> float:
    """Mean of ``f_i(phi_i, lam)`` over all samples at one global ``lam``."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.size != problem.d_lambda:
        raise DimensionError(f"lambda has {lam.size} entries, want {problem.d_lambda}")
    idx = np.arange(problem.n)
    lam_all = np.broadcast_to(lam, (problem.n, problem.d_lambda))
    return float(np.mean(problem.oracle.value(idx, phi, lam_all)))


def global_gradient(problem: ConsensusProblem, phi, lam) -> np.ndarray:
    idx = np.arange(problem.n)
    lam_all = np.broadcast_to(np.asarray(lam, dtype=float), (problem.n, problem.d_lambda))
    return problem.oracle.grad(idx, phi, lam_all)[1].mean(axis=0)


def consensus_residual(state: SolverState) -> float:
    """Largest distance between a local copy and the global variable."""
    return float(np.max(np.linalg.norm(state.lam - state.lambda0, axis=1)))
