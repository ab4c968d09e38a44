"""Potts coupling on a spatial neighbourhood graph."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import softmax


@dataclass
class SpatialGraph:
    """Undirected weighted graph, each edge stored once as ``(i, j)`` with ``i < j``."""

    n: int
    edges: np.ndarray  # (E, 2) int
    weights: np.ndarray  # (E,)
    patches: np.ndarray | None = None  # (n,) patch id per node
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.edges.shape[0] != self.weights.shape[0]:
            raise ValueError("one weight per edge required")
        if self.edges.size:
            lo = self.edges.min(axis=1)
            hi = self.edges.max(axis=1)
            self.edges = np.stack([lo, hi], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        i, j = self.edges.T
        W = sp.coo_matrix((self.weights, (i, j)), shape=(self.n, self.n))
        return (W + W.T).tocsr()

    def neighbors(self, i: int) -> np.ndarray:
        A = self.adjacency()
        return A.indices[A.indptr[i]:A.indptr[i + 1]]

    def cross_patch_mask(self) -> np.ndarray:
        if self.patches is None:
            return np.zeros(len(self.edges), bool)
        return self.patches[self.edges[:, 0]] != self.patches[self.edges[:, 1]]

    def with_patches(self, patches) -> "SpatialGraph":
        return SpatialGraph(self.n, self.edges, self.weights,
                            np.asarray(patches, dtype=np.intp), dict(self.flags))

    def within_patches(self) -> "SpatialGraph":
        """Copy with every cross-patch edge removed."""
        keep = ~self.cross_patch_mask()
        return SpatialGraph(self.n, self.edges[keep], self.weights[keep],
                            self.patches, dict(self.flags))


def _cos(a, b):
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    out = np.zeros(np.broadcast(na, nb).shape)
    dot = np.sum(a * b, axis=-1)
    np.divide(dot, na * nb, out=out, where=ok)
    return out, ~ok


def edge_weights(g, l_i, l_j, x_i, x_j, tau):
    """Vectorized edge weights; returns ``(weights, n_zero_norm_terms)``."""
    flow, bad1 = _cos(np.asarray(g, float), np.asarray(l_j, float) - np.asarray(l_i, float))
    feat, bad2 = _cos(np.asarray(x_i, float), np.asarray(x_j, float))
    w = np.abs(flow) + tau * np.where(bad2, 0.0, feat + 1.0)
    return w, int(np.sum(bad1) + np.sum(bad2))


def edge_weight(g_i, l_i, l_j, x_i, x_j, tau) -> float:
    """Weight of edge (i, j): flow alignment plus ``tau`` times feature similarity.

    ``|cos(g_i, l_j - l_i)| + tau * (cos(x_i, x_j) + 1)``. A cosine involving a
    zero vector is taken as 0 for the flow term and drops the whole feature
    term, with a warning.
    """
    w, bad = edge_weights(g_i, l_i, l_j, x_i, x_j, tau)
    if bad:
        warnings.warn("zero-norm vector in edge weight; term set to 0", RuntimeWarning)
    return float(w)


def potts_penalty_eval_grad(alpha_i, alpha_nbrs, r):
    """Sample ``i``'s share of the Potts energy and its logit gradients.

    The share is ``-1/2 sum_l r_il <phi_i, phi_l>``; summed over all nodes this
    gives ``-sum_{edges} r_ij <phi_i, phi_j>``.

    Returns ``(value, grad_alpha_i, grad_alpha_nbrs)``.
    """
    alpha_i = np.asarray(alpha_i, float)
    alpha_nbrs = np.asarray(alpha_nbrs, float).reshape(-1, alpha_i.size)
    r = np.asarray(r, float).reshape(-1)
    if alpha_nbrs.shape[0] != r.size:
        raise ValueError("missing neighbour data: need one logit row per weight")
    if r.size == 0:
        return 0.0, np.zeros_like(alpha_i), np.zeros_like(alpha_nbrs)
    p = softmax(alpha_i)
    q = softmax(alpha_nbrs, axis=1)
    value = -0.5 * float(np.sum(r * (q @ p)))
    dp = -0.5 * (r @ q)
    dq = -0.5 * r[:, None] * p[None, :]
    g_i = p * (dp - p @ dp)
    g_n = q * (dq - np.sum(q * dq, axis=1, keepdims=True))
    return value, g_i, g_n


def greedy_coloring(graph: SpatialGraph) -> np.ndarray:
    """Colour nodes so that no edge joins two nodes of the same colour."""
    A = graph.adjacency()
    colors = np.full(graph.n, -1, dtype=np.intp)
    for v in range(graph.n):
        used = set(colors[A.indices[A.indptr[v]:A.indptr[v + 1]]].tolist())
        c = 0
        while c in used:
            c += 1
        colors[v] = c
    return colors
