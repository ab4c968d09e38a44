"""Evaluation metrics: mixture Wasserstein distance, adjusted Rand index, gradient norm."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ConsensusProblem, SolverState, global_gradient

MIXTURE_W2_DEFINITION = (
    "optimal one-to-one component matching of closed-form diagonal-Gaussian W2 "
    "costs, weighted root-mean of matched squared distances"
)


@dataclass
class GaussianMixtureSummary:
    """Weights, means and diagonal variances of a K-component mixture.

    ``variances`` may be (K, d), (d,) shared across components, or (K,) with
    one isotropic variance per component; a length-K vector is read the
    latter way.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, float))
        var = np.asarray(self.variances, float)
        if var.ndim == 1 and var.size == self.means.shape[0]:
            var = var[:, None]  # one isotropic variance per component
        self.variances = np.broadcast_to(var, self.means.shape).copy()
        if not np.isclose(self.weights.sum(), 1.0) or np.any(self.weights < 0):
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def K(self) -> int:
        return self.weights.size

    def permuted(self, perm) -> "GaussianMixtureSummary":
        perm = np.asarray(perm)
        return GaussianMixtureSummary(self.weights[perm], self.means[perm], self.variances[perm])


def w2_gaussian_diag(mean1, var1, mean2, var2) -> float:
    """2-Wasserstein distance between two diagonal Gaussians."""
    var1, var2 = np.asarray(var1, float), np.asarray(var2, float)
    if np.any(var1 <= 0) or np.any(var2 <= 0):
        raise ValueError("variances must be positive")
    sq = np.sum((np.asarray(mean1, float) - np.asarray(mean2, float)) ** 2)
    sq += np.sum((np.sqrt(var1) - np.sqrt(var2)) ** 2)
    return float(np.sqrt(sq))


def _pairwise_w2_sq(a: GaussianMixtureSummary, b: GaussianMixtureSummary):
    dm = np.sum((a.means[:, None, :] - b.means[None, :, :]) ** 2, axis=2)
    ds = np.sum((np.sqrt(a.variances)[:, None, :] - np.sqrt(b.variances)[None, :, :]) ** 2, axis=2)
    return dm + ds


def mixture_w2_matched(a: GaussianMixtureSummary, b: GaussianMixtureSummary) -> float:
    """Distance between equal-size mixtures under the best component matching.

    ``sqrt(min_perm sum_k w_k W2(a_k, b_perm(k))^2)`` with ``w`` the weights of
    ``a``; the assignment is solved exactly with the Hungarian method.
    """
    if a.K != b.K:
        raise ValueError(f"mixtures have {a.K} and {b.K} components")
    cost = a.weights[:, None] * _pairwise_w2_sq(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(max(cost[rows, cols].sum(), 0.0)))


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Adjusted Rand index between two labelings of the same items."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label sequences must have equal length")
    if a.size < 2:
        raise ValueError("need at least two items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(counts):
        counts = np.asarray(counts, dtype=np.int64)
        return int(np.sum(counts * (counts - 1) // 2))

    # integer pair counts with one final division, so hand cases come out exact
    sum_cells = pairs(table)
    sum_a, sum_b = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = a.size * (a.size - 1) // 2
    num = 2 * (total * sum_cells - sum_a * sum_b)
    den = total * (sum_a + sum_b) - 2 * sum_a * sum_b
    if den == 0:
        return 1.0
    return num / den


def global_grad_norm(problem: ConsensusProblem, state: SolverState) -> float:
    """Norm of the mean lambda-gradient at ``lambda0`` with the held local variables."""
    return float(np.linalg.norm(global_gradient(problem, state.phi, state.lambda0)))


def variational_mixture(lam0, hyper) -> GaussianMixtureSummary:
    """Equal-weight predictive mixture ``N(m_k, sigma0^2 + s_k^2)`` of a GMM global iterate."""
    from .objectives.gmm import _exp_rho, unpack_global

    m, rho = unpack_global(np.asarray(lam0, float), hyper.K, hyper.d)
    return GaussianMixtureSummary(np.full(hyper.K, 1.0 / hyper.K), m,
                                  hyper.sigma0_sq[None, :] + _exp_rho(rho))
