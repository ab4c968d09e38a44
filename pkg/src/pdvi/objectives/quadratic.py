"""Strongly convex quadratic samples ``f_i(z) = z^T Q_i z + v_i^T z`` with z = (phi, lambda)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import BlockPartition, DimensionError, ObjectiveOracle


@dataclass
class QuadraticInstance:
    Q: np.ndarray  # (n, D, D)
    v: np.ndarray  # (n, D)
    d_phi: int
    d_lambda: int

    @property
    def n(self) -> int:
        return self.Q.shape[0]


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def generate_quadratic_instance(n, d_phi, d_lambda, cond=1000.0, seed=0, v=None,
                                block_scales=None, block_dims=None):
    """Random SPD quadratics with a prescribed condition number.

    Each ``Q_i = R_i^T diag(e) R_i`` where ``e`` is log-spaced on ``[1, cond]``
    and ``R_i`` is a seeded random rotation, so every ``Q_i`` has condition
    number exactly ``cond``.

    ``block_scales`` optionally rescales the lambda blocks (sizes
    ``block_dims``): the coordinates of block ``j`` are multiplied by
    ``sqrt(block_scales[j])`` on both sides, which multiplies that block's
    curvature by ``block_scales[j]``. The condition-number contract then no
    longer applies.
    """
    if cond < 1:
        raise ValueError("cond must be >= 1")
    rng = np.random.default_rng(seed)
    dim = d_phi + d_lambda
    eig = np.logspace(0.0, np.log10(cond), dim)
    Q = np.empty((n, dim, dim))
    for i in range(n):
        R = random_rotation(rng, dim)
        Q[i] = (R.T * eig) @ R
    Q = 0.5 * (Q + np.transpose(Q, (0, 2, 1)))
    if block_scales is not None:
        block_dims = block_dims or (d_lambda,)
        if sum(block_dims) != d_lambda or len(block_dims) != len(block_scales):
            raise DimensionError("block_scales and block_dims do not match d_lambda")
        s = np.concatenate([np.ones(d_phi), np.repeat(np.sqrt(block_scales), block_dims)])
        Q = Q * s[None, :, None] * s[None, None, :]
    if v is None:
        v = np.zeros((n, dim))
    else:
        v = np.broadcast_to(np.asarray(v, dtype=float), (n, dim)).copy()
    return QuadraticInstance(Q, v, d_phi, d_lambda)


def quadratic_eval_grad(Q, v, z):
    """Value ``z^T Q z + v^T z`` and gradient ``(Q + Q^T) z + v``."""
    Q, v, z = np.asarray(Q, float), np.asarray(v, float), np.asarray(z, float)
    if Q.shape[-1] != z.shape[-1]:
        raise DimensionError(f"z has {z.shape[-1]} entries, Q is {Q.shape[-2:]}")
    Qz = np.einsum("...ij,...j->...i", Q, z)
    QTz = np.einsum("...ji,...j->...i", Q, z)
    return np.sum(z * Qz, axis=-1) + np.sum(v * z, axis=-1), Qz + QTz + v


def _power_iteration(S, iters=500, seed=0):
    """Largest eigenvalue of each symmetric PSD matrix in the stack ``S``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(S.shape[:-1])
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    lam = np.zeros(S.shape[0])
    for _ in range(iters):
        y = np.einsum("nij,nj->ni", S, x)
        new = np.linalg.norm(y, axis=-1)
        x = y / np.where(new > 0, new, 1.0)[:, None]
        if np.allclose(new, lam, rtol=1e-13, atol=0):
            lam = new
            break
        lam = new
    return lam


class QuadraticObjective(ObjectiveOracle):
    def __init__(self, instance: QuadraticInstance, block_dims=None):
        self.instance = instance
        self.n = instance.n
        self.d_phi = instance.d_phi
        self.partition = BlockPartition(tuple(block_dims or (instance.d_lambda,)))
        if self.partition.total != instance.d_lambda:
            raise DimensionError("block dims do not sum to d_lambda")
        self._S = instance.Q + np.transpose(instance.Q, (0, 2, 1))

    def _z(self, phi, lam):
        return np.concatenate([phi, lam], axis=1)

    def value(self, idx, phi, lam):
        idx, phi, lam = self.check_inputs(idx, phi, lam)
        val, _ = quadratic_eval_grad(self.instance.Q[idx], self.instance.v[idx], self._z(phi, lam))
        return val

    def grad(self, idx, phi, lam):
        idx, phi, lam = self.check_inputs(idx, phi, lam)
        _, g = quadratic_eval_grad(self.instance.Q[idx], self.instance.v[idx], self._z(phi, lam))
        return g[:, : self.d_phi], g[:, self.d_phi:]

    def hessian(self, i):
        return self._S[i]

    def _solve_block(self, coords, idx, z, extra_diag=0.0, extra_rhs=0.0):
        S = self._S[idx]
        Sz = np.einsum("nij,nj->ni", S[:, coords, :], z)
        Scc = S[:, coords][:, :, coords]
        rhs = -self.instance.v[idx][:, coords] - (Sz - np.einsum("nij,nj->ni", Scc, z[:, coords]))
        A = Scc + np.diag(extra_diag) if np.ndim(extra_diag) else Scc
        return np.linalg.solve(A, (rhs + extra_rhs)[..., None])[..., 0]

    def minimize_phi(self, idx, phi, lam):
        if self.d_phi == 0:
            return phi
        idx = np.asarray(idx, dtype=np.intp)
        z = self._z(phi, lam)
        return self._solve_block(np.arange(self.d_phi), idx, z)

    def initial_phi(self, lambda0):
        lam = np.tile(lambda0, (self.n, 1))
        return self.minimize_phi(np.arange(self.n), np.zeros((self.n, self.d_phi)), lam)

    def block_minimize(self, block, idx, phi, lam, mu, lam0, penalty):
        idx = np.asarray(idx, dtype=np.intp)
        z = self._z(phi, lam)
        if block == "phi":
            return self.minimize_phi(idx, phi, lam)
        sl = self.partition.slices()[block]
        coords = np.arange(sl.start, sl.stop) + self.d_phi
        pen = penalty[sl]
        lam0_b = lam0[..., sl]
        new = self._solve_block(coords, idx, z, extra_diag=pen,
                                extra_rhs=-mu[:, sl] + pen * lam0_b)
        out = lam.copy()
        out[:, sl] = new
        return out

    def al_closed_form(self, idx, mu, lam0, penalty):
        idx = np.asarray(idx, dtype=np.intp)
        S = self._S[idx]
        diag = np.concatenate([np.zeros(self.d_phi), penalty])
        A = S + np.eye(S.shape[-1]) * diag
        lam0 = np.broadcast_to(lam0, mu.shape)
        rhs = -self.instance.v[idx] - np.concatenate(
            [np.zeros((idx.size, self.d_phi)), mu - penalty * lam0], axis=1)
        z = np.linalg.solve(A, rhs[..., None])[..., 0]
        return z[:, : self.d_phi], z[:, self.d_phi:]

    def lipschitz_estimates(self, lam=None):
        """Largest gradient-Lipschitz constant of each lambda block over samples.

        For block ``j`` with coordinates ``c`` this is the spectral norm of the
        Hessian row block ``(Q + Q^T)[c, :]``, obtained by power iteration.
        """
        out = []
        for sl in self.partition.slices():
            rows = self._S[:, self.d_phi + sl.start: self.d_phi + sl.stop, :]
            gram = np.einsum("nij,nkj->nik", rows, rows)
            out.append(np.sqrt(_power_iteration(gram).max()))
        return np.array(out)

    def lipschitz_phi(self, lam=None):
        if self.d_phi == 0:
            return None
        rows = self._S[:, : self.d_phi, :]
        gram = np.einsum("nij,nkj->nik", rows, rows)
        return float(np.sqrt(_power_iteration(gram).max()))

    def full_value(self, phi, lam0):
        """Directly coded mean objective at a common global point."""
        lam = np.broadcast_to(lam0, (self.n, self.d_lambda))
        z = self._z(phi, lam)
        return float(np.mean(np.einsum("ni,nij,nj->n", z, self.instance.Q, z)
                             + np.sum(self.instance.v * z, axis=1)))
