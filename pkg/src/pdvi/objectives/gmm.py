"""Mean-field Gaussian mixture negative ELBO, optionally with a Potts prior.

Variational family: ``q(zeta_i) = Categorical(softmax(alpha_i))`` per point and
``q(c_kj) = N(m_kj, exp(rho_kj))`` per cluster and feature. Observations are
``x_i | zeta_i = k ~ N(c_k, diag(sigma0_sq))`` with prior
``c_k ~ N(xi, diag(sigma1_sq))``.

Consensus samples are *groups* of points. Plain GMM uses one point per
group; the spatial model uses patches whose internal edges carry the Potts
coupling. A group's local variable stacks the logits of its points, padded
to the largest group size. The global variable is ``(m.ravel(), rho.ravel())``
split into a means block and a log-variance block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from ..core import BlockPartition, DimensionError, ObjectiveOracle, check_finite
from .potts import SpatialGraph, greedy_coloring

RHO_CLIP = 30.0
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmHyperParams:
    xi: np.ndarray
    sigma0_sq: np.ndarray
    sigma1_sq: np.ndarray
    K: int

    def __post_init__(self):
        self.xi = np.asarray(self.xi, float).reshape(-1)
        d = self.xi.size
        self.sigma0_sq = np.broadcast_to(np.asarray(self.sigma0_sq, float), (d,)).copy()
        self.sigma1_sq = np.broadcast_to(np.asarray(self.sigma1_sq, float), (d,)).copy()
        if np.any(self.sigma0_sq <= 0) or np.any(self.sigma1_sq <= 0):
            raise ValueError("prior and noise variances must be positive")
        self.K = int(self.K)

    @property
    def d(self) -> int:
        return self.xi.size


def pack_global(m, rho) -> np.ndarray:
    return np.concatenate([np.ravel(m), np.ravel(rho)])


def unpack_global(lam, K, d):
    lam = np.asarray(lam, float)
    kd = K * d
    return lam[..., :kd].reshape(lam.shape[:-1] + (K, d)), lam[..., kd:].reshape(lam.shape[:-1] + (K, d))


def _exp_rho(rho):
    return np.exp(np.clip(rho, -RHO_CLIP, RHO_CLIP))


def gmm_negelbo_eval_grad(x_i, alpha_i, m, rho, hyper: GmmHyperParams, n,
                          include_constants=True):
    """Per-point negative ELBO ``f_i`` of the GMM (no Potts term) and its gradients.

    Returns ``(value, grad_alpha, grad_m, grad_rho)``.
    """
    x_i = np.asarray(x_i, float).reshape(-1)
    alpha_i = np.asarray(alpha_i, float).reshape(-1)
    m = np.asarray(m, float)
    rho = np.asarray(rho, float)
    K, d = hyper.K, hyper.d
    if alpha_i.size != K or m.shape != (K, d) or rho.shape != (K, d) or x_i.size != d:
        raise DimensionError("GMM parameter shapes do not match (K, d)")
    s0, s1, xi = hyper.sigma0_sq, hyper.sigma1_sq, hyper.xi
    logp = log_softmax(alpha_i)
    p = np.exp(logp)
    E = _exp_rho(rho)
    cost = 0.5 * np.sum((m**2 + E - 2.0 * x_i * m) / s0, axis=1)
    glob = 0.5 * np.sum((m**2 + E - 2.0 * xi * m) / s1 - rho)
    value = np.sum(p * (logp + cost)) + glob / n
    if include_constants:
        value += 0.5 * np.sum(LOG_2PI + np.log(s0) + x_i**2 / s0)
        value += 0.5 * K * np.sum(np.log(s1) + xi**2 / s1 - 1.0) / n
    gp = logp + 1.0 + cost
    g_alpha = p * (gp - p @ gp)
    g_m = p[:, None] * (m - x_i) / s0 + (m - xi) / (n * s1)
    g_rho = 0.5 * E * (p[:, None] / s0 + 1.0 / (n * s1)) - 0.5 / n
    return float(value), g_alpha, g_m, g_rho


def negative_elbo(X, alpha, m, rho, hyper: GmmHyperParams, graph: SpatialGraph | None = None,
                  include_constants=True):
    """Full negative ELBO summed over points, coded term by term.

    Terms: expected log-likelihood, prior on the cluster means, Potts energy
    (``log Z`` omitted), entropy of ``q(zeta)`` and entropy of ``q(c)``. With
    ``include_constants=False`` the data- and hyperparameter-only constants
    are dropped.
    """
    X = np.asarray(X, float)
    s0, s1, xi = hyper.sigma0_sq, hyper.sigma1_sq, hyper.xi
    logp = log_softmax(np.asarray(alpha, float), axis=1)
    p = np.exp(logp)
    E = _exp_rho(np.asarray(rho, float))
    sq = (X[:, None, :] - m[None, :, :]) ** 2 + E[None]  # (N, K, d)
    lik = 0.5 * np.einsum("nk,nkj->", p, sq / s0)
    prior = 0.5 * np.sum(((m - xi) ** 2 + E) / s1)
    ent_z = np.sum(p * logp)
    ent_c = -0.5 * np.sum(np.log(E))
    total = lik + prior + ent_z + ent_c
    if graph is not None and len(graph.edges):
        i, j = graph.edges.T
        total -= np.sum(graph.weights * np.sum(p[i] * p[j], axis=1))
    if include_constants:
        N, K = X.shape[0], hyper.K
        total += 0.5 * N * np.sum(LOG_2PI + np.log(s0))
        total += 0.5 * K * np.sum(LOG_2PI + np.log(s1))
        total += -0.5 * K * hyper.d * (LOG_2PI + 1.0)
    else:
        total -= 0.5 * np.sum(X**2 / s0)
        total -= 0.5 * hyper.K * np.sum(xi**2 / s1)
    return float(total)


class MeanFieldGmmObjective(ObjectiveOracle):
    """Grouped per-sample GMM objective with optional within-group Potts edges.

    Parameters
    ----------
    X : ndarray, shape (N, d)
    hyper : GmmHyperParams
    groups : sequence of int arrays, optional
        Point indices of each consensus sample. Defaults to one point each.
    graph : SpatialGraph, optional
        Edges crossing groups are ignored.
    include_constants : bool
        Whether values carry the parameter-independent constants.

    Each group ``g`` with points ``P_g`` gets

        f_g = (G / N) * sum_{i in P_g} [ point terms_i + global terms / N
                                         - 1/2 sum_l r_il <phi_i, phi_l> ]

    so that the mean over groups is the negative ELBO divided by ``N``.
    """

    def __init__(self, X, hyper: GmmHyperParams, groups=None, graph=None,
                 include_constants=False):
        self.X = check_finite("X", X)
        N, d = self.X.shape
        if d != hyper.d:
            raise DimensionError(f"data has {d} features, hyperparameters {hyper.d}")
        self.hyper = hyper
        self.K = hyper.K
        self.N = N
        self.include_constants = include_constants
        if groups is None:
            self.pts = np.arange(N)[:, None]
            self.mask = np.ones((N, 1), bool)
        else:
            groups = [np.asarray(g, dtype=np.intp) for g in groups]
            P = max(len(g) for g in groups)
            self.pts = np.zeros((len(groups), P), dtype=np.intp)
            self.mask = np.zeros((len(groups), P), bool)
            for r, g in enumerate(groups):
                self.pts[r, : len(g)] = g
                self.mask[r, : len(g)] = True
            covered = np.sort(self.pts[self.mask])
            if covered.size != N or np.any(covered != np.arange(N)):
                raise ValueError("groups must partition the points")
        self.n, self.P = self.pts.shape
        self.sizes = self.mask.sum(axis=1)
        self.weight = self.n / N
        self.d_phi = self.P * self.K
        self.partition = BlockPartition((self.K * d, self.K * d))
        self.graph = graph
        self.W = None
        self.colors = None
        if graph is not None and len(graph.edges):
            self._build_group_graph(graph)
        self.reference_lambda = None

    # -- construction helpers ------------------------------------------------
    def _build_group_graph(self, graph):
        group_of = np.full(self.N, -1)
        slot_of = np.zeros(self.N, dtype=np.intp)
        rows, cols = np.nonzero(self.mask)
        group_of[self.pts[rows, cols]] = rows
        slot_of[self.pts[rows, cols]] = cols
        i, j = graph.edges.T
        same = group_of[i] == group_of[j]
        W = np.zeros((self.n, self.P, self.P))
        g, a, b = group_of[i[same]], slot_of[i[same]], slot_of[j[same]]
        np.add.at(W, (g, a, b), graph.weights[same])
        np.add.at(W, (g, b, a), graph.weights[same])
        self.W = W
        inside = SpatialGraph(self.N, graph.edges[same], graph.weights[same])
        colors = greedy_coloring(inside)
        self.colors = np.where(self.mask, colors[self.pts], -1)
        self.n_dropped_edges = int((~same).sum())

    # -- helpers ---------------------------------------------------------------
    def _gather(self, idx):
        pts, mask = self.pts[idx], self.mask[idx]
        Xg = self.X[pts] * mask[..., None]
        return Xg, mask

    def _alpha(self, phi):
        return phi.reshape(phi.shape[0], self.P, self.K)

    def _probs(self, alpha, mask):
        logp = log_softmax(alpha, axis=2)
        p = np.exp(logp) * mask[..., None]
        return logp * mask[..., None], p

    def _costs(self, Xg, M, E):
        s0 = self.hyper.sigma0_sq
        quad = 0.5 * np.sum((M**2 + E) / s0, axis=2)  # (m, K)
        cross = np.einsum("mpj,mkj->mpk", Xg / s0, M)
        return quad[:, None, :] - cross

    def _coupling(self, idx, p):
        if self.W is None:
            return np.zeros_like(p)
        return np.einsum("mpq,mqk->mpk", self.W[idx], p)

    def unpack(self, lam):
        return unpack_global(lam, self.K, self.hyper.d)

    def point_probabilities(self, phi) -> np.ndarray:
        """Responsibilities ``(N, K)`` in original point order."""
        alpha = self._alpha(np.asarray(phi, float))
        out = np.zeros((self.N, self.K))
        out[self.pts[self.mask]] = softmax(alpha[self.mask], axis=1)
        return out

    def point_logits(self, phi) -> np.ndarray:
        alpha = self._alpha(np.asarray(phi, float))
        out = np.zeros((self.N, self.K))
        out[self.pts[self.mask]] = alpha[self.mask]
        return out

    def labels(self, phi) -> np.ndarray:
        return np.argmax(self.point_probabilities(phi), axis=1)

    def phi_from_point_logits(self, alpha_points) -> np.ndarray:
        alpha = np.asarray(alpha_points, float)[self.pts] * self.mask[..., None]
        return alpha.reshape(self.n, self.d_phi)

    # -- oracle interface --------------------------------------------------------
    def value(self, idx, phi, lam):
        idx, phi, lam = self.check_inputs(idx, phi, lam)
        Xg, mask = self._gather(idx)
        M, R = self.unpack(lam)
        E = _exp_rho(R)
        logp, p = self._probs(self._alpha(phi), mask)
        c = self._costs(Xg, M, E)
        h = self.hyper
        local = np.sum(p * (logp + c), axis=(1, 2))
        glob = 0.5 * np.sum((M**2 + E - 2.0 * h.xi * M) / h.sigma1_sq - R, axis=(1, 2))
        val = local + self.sizes[idx] * glob / self.N
        if self.W is not None:
            val -= 0.5 * np.sum(p * self._coupling(idx, p), axis=(1, 2))
        if self.include_constants:
            s0 = h.sigma0_sq
            pc = 0.5 * np.sum((LOG_2PI + np.log(s0) + Xg**2 / s0) * mask[..., None], axis=(1, 2))
            gc = 0.5 * self.K * np.sum(np.log(h.sigma1_sq) + h.xi**2 / h.sigma1_sq - 1.0)
            val += pc + self.sizes[idx] * gc / self.N
        return self.weight * val

    def _sufficient(self, idx, p, Xg):
        S = p.sum(axis=1)  # (m, K)
        Sx = np.einsum("mpk,mpj->mkj", p, Xg)
        return S, Sx

    def grad(self, idx, phi, lam):
        idx, phi, lam = self.check_inputs(idx, phi, lam)
        Xg, mask = self._gather(idx)
        M, R = self.unpack(lam)
        E = _exp_rho(R)
        logp, p = self._probs(self._alpha(phi), mask)
        c = self._costs(Xg, M, E)
        gp = (logp + 1.0 + c - self._coupling(idx, p)) * mask[..., None]
        g_alpha = p * (gp - np.sum(p * gp, axis=2, keepdims=True))
        h = self.hyper
        S, Sx = self._sufficient(idx, p, Xg)
        frac = (self.sizes[idx] / self.N)[:, None, None]
        g_m = (S[..., None] * M - Sx) / h.sigma0_sq + frac * (M - h.xi) / h.sigma1_sq
        g_r = 0.5 * E * (S[..., None] / h.sigma0_sq + frac / h.sigma1_sq) - 0.5 * frac
        w = self.weight
        g_lam = np.concatenate([g_m.reshape(len(idx), -1), g_r.reshape(len(idx), -1)], axis=1)
        return w * g_alpha.reshape(len(idx), -1), w * g_lam

    # -- exact block updates -------------------------------------------------------
    def _phi_sweep(self, idx, alpha, mask, c):
        """One exact pass over the logits; colour classes are updated in turn."""
        if self.W is None:
            alpha = -c
        else:
            colors = self.colors[idx]
            for col in range(colors.max() + 1):
                _, p = self._probs(alpha, mask)
                target = -c + self._coupling(idx, p)
                sel = (colors == col)[..., None]
                alpha = np.where(sel, target, alpha)
        alpha = alpha - alpha.mean(axis=2, keepdims=True)
        return alpha * mask[..., None]

    def minimize_phi(self, idx, phi, lam, tol=1e-10, max_sweeps=500):
        idx = np.asarray(idx, dtype=np.intp)
        Xg, mask = self._gather(idx)
        M, R = self.unpack(np.asarray(lam, float))
        c = self._costs(Xg, M, _exp_rho(R))
        alpha = self._alpha(np.asarray(phi, float))
        for _ in range(1 if self.W is None else max_sweeps):
            new = self._phi_sweep(idx, alpha, mask, c)
            done = np.max(np.abs(new - alpha), initial=0.0) <= tol
            alpha = new
            if done:
                break
        return alpha.reshape(len(idx), -1)

    def initial_phi(self, lambda0):
        lam = np.tile(np.asarray(lambda0, float), (self.n, 1))
        return self.minimize_phi(np.arange(self.n), np.zeros((self.n, self.d_phi)), lam)

    def block_minimize(self, block, idx, phi, lam, mu, lam0, penalty):
        idx = np.asarray(idx, dtype=np.intp)
        Xg, mask = self._gather(idx)
        M, R = self.unpack(lam)
        if block == "phi":
            c = self._costs(Xg, M, _exp_rho(R))
            alpha = self._phi_sweep(idx, self._alpha(phi), mask, c)
            return alpha.reshape(len(idx), -1)
        h, w = self.hyper, self.weight
        _, p = self._probs(self._alpha(phi), mask)
        S, Sx = self._sufficient(idx, p, Xg)
        frac = (self.sizes[idx] / self.N)[:, None, None]
        mu_m, mu_r = self.unpack(mu)
        pen_m, pen_r = self.unpack(penalty)
        lam0 = np.broadcast_to(lam0, lam.shape)
        M0, R0 = self.unpack(lam0)
        out = np.array(lam, dtype=float)
        kd = self.K * h.d
        if block == 0:
            num = w * (Sx / h.sigma0_sq + frac * h.xi / h.sigma1_sq) - mu_m + pen_m * M0
            den = w * (S[..., None] / h.sigma0_sq + frac / h.sigma1_sq) + pen_m
            out[:, :kd] = (num / den).reshape(len(idx), -1)
            return out
        if block == 1:
            A = 0.5 * w * (S[..., None] / h.sigma0_sq + frac / h.sigma1_sq)
            b = mu_r - 0.5 * w * frac - pen_r * R0
            out[:, kd:] = solve_exp_linear(A, pen_r, b).reshape(len(idx), -1)
            return out
        return None

    def natural_update(self, idx, phi, lam0, rate):
        """SVI global step: blend natural parameters toward the conjugate update.

        The batch statistics are scaled by ``N / (points in batch)``; with
        ``rate = 1`` and the full data this is the exact coordinate update of
        ``(m, s^2)`` given the responsibilities.
        """
        idx = np.asarray(idx, dtype=np.intp)
        Xg, mask = self._gather(idx)
        _, p = self._probs(self._alpha(np.asarray(phi, float)), mask)
        S, Sx = self._sufficient(idx, p, Xg)
        scale = self.N / mask.sum()
        h = self.hyper
        prec_t = scale * S.sum(axis=0)[:, None] / h.sigma0_sq + 1.0 / h.sigma1_sq
        lin_t = scale * Sx.sum(axis=0) / h.sigma0_sq + h.xi / h.sigma1_sq
        M, R = self.unpack(np.asarray(lam0, float))
        prec = np.exp(-R)
        prec_new = (1.0 - rate) * prec + rate * prec_t
        lin_new = (1.0 - rate) * M * prec + rate * lin_t
        return pack_global(lin_new / prec_new, -np.log(prec_new))

    # -- curvature bounds ----------------------------------------------------------
    def lipschitz_estimates(self, lam=None):
        """Diagonal-Hessian bounds for the means and log-variance blocks.

        Means: ``w |g| max_j (1/sigma0_j^2 + 1/(N sigma1_j^2))``. Log-variances:
        the same scale times ``exp(rho) / 2`` at the largest current ``rho``
        (taken from ``lam``, or ``reference_lambda`` when ``lam`` is None).
        """
        h = self.hyper
        scale = self.weight * self.sizes.max() * np.max(1.0 / h.sigma0_sq + 1.0 / (self.N * h.sigma1_sq))
        if lam is None:
            lam = self.reference_lambda
        rho_max = 0.0 if lam is None else float(np.max(self.unpack(np.asarray(lam, float))[1]))
        return np.array([scale, 0.5 * scale * np.exp(min(rho_max, RHO_CLIP))])

    def lipschitz_phi(self, lam=None):
        return None


def solve_exp_linear(A, c, b, tol=1e-13, max_iter=200):
    """Root of ``A exp(r) + c r + b = 0`` elementwise (``A > 0``, ``c > 0``).

    Newton's method started right of the root, where the convex increasing
    function is positive, so iterates decrease monotonically. Results are
    clipped to ``[-RHO_CLIP, RHO_CLIP]``.
    """
    A, c, b = np.broadcast_arrays(np.asarray(A, float), np.asarray(c, float), np.asarray(b, float))
    r = np.minimum(-b / c, RHO_CLIP)
    for _ in range(max_iter):
        e = np.exp(r)
        g = A * e + c * r + b
        step = g / (A * e + c)
        r = np.clip(r - step, -RHO_CLIP, RHO_CLIP)
        if np.all(np.abs(step) <= tol * (1.0 + np.abs(r))):
            break
    return r


def phi_hessian_diag(p) -> np.ndarray:
    """Diagonal Hessian of ``sum_k p_k log p_k`` in the probabilities."""
    return 1.0 / np.asarray(p, float)


def gmm_hyper_from_data(X, K, seed=0, max_iter=50):
    """Empirical-Bayes hyperparameters and initial labels via k-means.

    ``xi`` is the data mean, ``sigma0_sq`` the pooled within-cluster variance
    and ``sigma1_sq`` the variance of the cluster centres (floored at
    ``1e-6`` times the data variance).
    """
    from sklearn.cluster import KMeans

    X = check_finite("X", X)
    if len(np.unique(X, axis=0)) < K:
        raise ValueError(f"need at least {K} distinct points")
    km = KMeans(n_clusters=K, init="k-means++", n_init=1, max_iter=max_iter, random_state=seed)
    labels = km.fit_predict(X)
    centers = np.stack([X[labels == k].mean(axis=0) for k in range(K)])
    resid = X - centers[labels]
    sigma0_sq = np.mean(resid**2, axis=0)
    floor = 1e-6 * X.var(axis=0)
    sigma0_sq = np.maximum(sigma0_sq, np.maximum(floor, 1e-12))
    sigma1_sq = centers.var(axis=0) if K > 1 else np.zeros(X.shape[1])
    sigma1_sq = np.maximum(sigma1_sq, np.maximum(floor, 1e-12))
    return GmmHyperParams(X.mean(axis=0), sigma0_sq, sigma1_sq, K), labels


def init_global_from_labels(X, labels, hyper: GmmHyperParams) -> np.ndarray:
    """Global start: cluster means of the labels and their conjugate posterior variances."""
    X = np.asarray(X, float)
    K = hyper.K
    m = np.tile(hyper.xi, (K, 1))
    prec = np.tile(1.0 / hyper.sigma1_sq, (K, 1))
    for k in range(K):
        sel = labels == k
        if sel.any():
            m[k] = X[sel].mean(axis=0)
            prec[k] += sel.sum() / hyper.sigma0_sq
    return pack_global(m, -np.log(prec))


def init_global_from_seeds(X, hyper: GmmHyperParams, seed=0) -> np.ndarray:
    """Global start from k-means++ seed points.

    Means are ``K`` data points chosen by k-means++ seeding (no Lloyd
    iterations); variances are the conjugate posterior variance of a cluster
    holding ``n / K`` points. This start is uninformed by any full clustering.
    """
    from sklearn.cluster import kmeans_plusplus

    X = check_finite("X", X)
    centers, _ = kmeans_plusplus(X, hyper.K, random_state=seed)
    prec = X.shape[0] / hyper.K / hyper.sigma0_sq + 1.0 / hyper.sigma1_sq
    return pack_global(centers, np.tile(-np.log(prec), (hyper.K, 1)))
