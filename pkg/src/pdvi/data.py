"""Synthetic data, biased batching, spatial graphs and table I/O."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .metrics import GaussianMixtureSummary
from .objectives.gmm import GmmHyperParams
from .objectives.quadratic import QuadraticInstance
from .objectives.potts import SpatialGraph, edge_weights

log = logging.getLogger(__name__)


class TableFormatError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    coords: np.ndarray | None = None
    true_labels: np.ndarray | None = None
    true_mixture: GaussianMixtureSummary | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, float))
        n = self.X.shape[0]
        if self.coords is not None:
            self.coords = np.asarray(self.coords, float).reshape(n, 2)
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64).reshape(-1)
            if self.true_labels.size != n:
                raise ValueError("label count does not match row count")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class PreprocessSpec:
    top_features: int | None = None
    normalize_depth: bool = True
    log1p: bool = True
    scale_clip: float = 10.0


# -- Gaussian mixtures -------------------------------------------------------------

def gmm_desk_hyper(d=10, sigma0_sq=1.0, sigma1_sq=9.0, K=5) -> GmmHyperParams:
    """Generating hyperparameters used by the GMM presets (unit noise, prior sd 3)."""
    return GmmHyperParams(np.zeros(d), np.full(d, sigma0_sq), np.full(d, sigma1_sq), K)


def sample_gmm(n, K, d, hyper: GmmHyperParams | None = None, seed=0) -> Dataset:
    """Equal-weight Gaussian mixture with centres drawn once from the prior."""
    if n < K:
        raise ValueError("need n >= K")
    hyper = hyper or gmm_desk_hyper(d=d, K=K)
    rng = np.random.default_rng(seed)
    centers = hyper.xi + np.sqrt(hyper.sigma1_sq) * rng.standard_normal((K, d))
    labels = rng.integers(0, K, size=n)
    X = centers[labels] + np.sqrt(hyper.sigma0_sq) * rng.standard_normal((n, d))
    mixture = GaussianMixtureSummary(np.full(K, 1.0 / K), centers, np.tile(hyper.sigma0_sq, (K, 1)))
    return Dataset(X, true_labels=labels, true_mixture=mixture)


def biased_batches(labels, batch_size, bias, seed=0):
    """One epoch of batches, each dominated by a single cluster.

    Batch ``b`` takes ``round(bias * batch_size)`` members from cluster
    ``b mod K`` (clusters in sorted label order) and is then topped up with
    uniformly drawn leftovers. Every index appears in exactly one batch.
    ``bias = 0`` gives plain uniform batches.
    """
    labels = np.asarray(labels)
    n = labels.size
    if not 0 <= bias <= 1:
        raise ValueError("bias must lie in [0, 1]")
    if batch_size > n or batch_size < 1:
        raise ValueError("batch size must lie in [1, n]")
    rng = np.random.default_rng(seed)
    clusters = np.unique(labels)
    n_batches = n // batch_size
    sizes = np.full(n_batches, batch_size)
    sizes[: n - n_batches * batch_size] += 1
    pools = {k: list(rng.permutation(np.flatnonzero(labels == k))) for k in clusters}
    batches = [[] for _ in range(n_batches)]
    short = 0
    for b in range(n_batches):
        k = clusters[b % clusters.size]
        want = int(round(bias * sizes[b]))
        take = min(want, len(pools[k]))
        short += want - take
        batches[b] = [pools[k].pop() for _ in range(take)]
    if short:
        warnings.warn(f"clusters too small for bias {bias}: {short} slots filled uniformly",
                      RuntimeWarning)
    rest = rng.permutation(np.concatenate([np.asarray(p, dtype=np.intp) for p in pools.values()]))
    pos = 0
    for b in range(n_batches):
        need = sizes[b] - len(batches[b])
        batches[b] = np.sort(np.concatenate([np.asarray(batches[b], dtype=np.intp),
                                             rest[pos:pos + need]]))
        pos += need
    return batches


# -- spatial data ------------------------------------------------------------------

def _knn(coords, k):
    """k nearest neighbours per point, ties broken by index."""
    n = coords.shape[0]
    k = min(k, n - 1)
    extra = min(n, k + 1 + 8)
    tree = cKDTree(coords)
    dist, idx = tree.query(coords, k=extra)
    dist, idx = np.atleast_2d(dist), np.atleast_2d(idx)
    out = np.empty((n, k), dtype=np.intp)
    for i in range(n):
        keep = idx[i] != i
        d_i, j_i = dist[i][keep], idx[i][keep]
        if extra < n and np.isclose(d_i[k - 1], d_i[-1]):
            # ties reach beyond the queried set: fall back to exact distances
            d_i = np.linalg.norm(coords - coords[i], axis=1)
            d_i[i] = np.inf
            j_i = np.arange(n)
        d_i = np.round(d_i, 12)
        order = np.lexsort((j_i, d_i))
        out[i] = j_i[order[:k]]
    return out


def build_knn_graph(coords, k=6, flows=None, X=None, tau=0.5) -> SpatialGraph:
    """Mutual k-nearest-neighbour graph with Potts edge weights.

    Without ``flows`` each point's flow is the unit vector toward its nearest
    neighbour. Without features ``X`` the feature term is omitted.
    """
    coords = np.asarray(coords, float)
    n = coords.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    nbrs = _knn(coords, k)
    A = np.zeros((n, n), bool) if n <= 4096 else None
    if A is not None:
        A[np.repeat(np.arange(n), nbrs.shape[1]), nbrs.ravel()] = True
        i, j = np.nonzero(np.triu(A & A.T, 1))
    else:
        pairs = {(a, b) for a in range(n) for b in nbrs[a]}
        mutual = sorted((a, b) for a, b in pairs if a < b and (b, a) in pairs)
        i, j = (np.array(v, dtype=np.intp) for v in zip(*mutual)) if mutual else (np.array([], int),) * 2
    if flows is None:
        flows = coords[nbrs[:, 0]] - coords
        norm = np.linalg.norm(flows, axis=1, keepdims=True)
        flows = np.divide(flows, norm, out=np.zeros_like(flows), where=norm > 0)
    flows = np.asarray(flows, float)
    if X is None:
        feats_i = feats_j = np.zeros((len(i), 1))
        tau_eff = 0.0
    else:
        X = np.asarray(X, float)
        feats_i, feats_j, tau_eff = X[i], X[j], tau
    w, bad = edge_weights(flows[i], coords[i], coords[j], feats_i, feats_j, tau_eff)
    if X is None:
        bad -= 2 * len(i)  # the omitted feature term is not a degeneracy
    if bad > 0:
        warnings.warn(f"{bad} zero-norm vectors in edge weights; terms set to 0", RuntimeWarning)
    return SpatialGraph(n, np.stack([i, j], axis=1), w, flags={"zero_norm_terms": max(bad, 0)})


def partition_patches(coords, target_patches) -> np.ndarray:
    """Axis-aligned grid tiling into about ``target_patches`` cells; empty cells dropped."""
    coords = np.asarray(coords, float)
    if target_patches < 1:
        raise ValueError("target_patches must be >= 1")
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    aspect = span[0] / span[1]
    nx = max(1, int(round(np.sqrt(target_patches * aspect))))
    ny = max(1, int(round(target_patches / nx)))
    cx = np.minimum(((coords[:, 0] - lo[0]) / span[0] * nx).astype(int), nx - 1)
    cy = np.minimum(((coords[:, 1] - lo[1]) / span[1] * ny).astype(int), ny - 1)
    _, patches = np.unique(cx * ny + cy, return_inverse=True)
    return patches.astype(np.intp)


def synth_spatial(n_side, K, d, seed=0, separation=20.0, noise_sd=1.0) -> Dataset:
    """Grid of spots split into ``K`` Voronoi regions with region-specific means.

    Region means are placed so that every pair is ``separation`` noise
    standard deviations apart (a scaled simplex when ``d >= K - 1``).
    """
    rng = np.random.default_rng(seed)
    g = np.arange(n_side, dtype=float)
    coords = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    centers = rng.uniform(0, n_side - 1, size=(K, 2))
    labels = np.argmin(((coords[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    _, labels = np.unique(labels, return_inverse=True)
    K_eff = labels.max() + 1
    means = _equidistant_means(K_eff, d, separation * noise_sd, rng)
    X = means[labels] + noise_sd * rng.standard_normal((coords.shape[0], d))
    mixture = GaussianMixtureSummary(np.bincount(labels) / labels.size, means,
                                     np.full((K_eff, d), noise_sd**2))
    return Dataset(X, coords=coords, true_labels=labels, true_mixture=mixture)


def _equidistant_means(K, d, dist, rng):
    if K == 1:
        return np.zeros((1, d))
    if d >= K:
        R = np.linalg.qr(rng.standard_normal((d, d)))[0]
        return (dist / np.sqrt(2.0)) * R[:K]
    pts = rng.standard_normal((K, d))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    gaps = np.linalg.norm(pts[:, None] - pts[None], axis=2)[np.triu_indices(K, 1)]
    return pts * dist / gaps.min()


# -- tables ------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def save_table(ds: Dataset, path, delimiter=","):
    """Write ``x0..x{d-1}[,cx,cy][,label]`` with a one-line header."""
    header = [f"x{j}" for j in range(ds.d)]
    if ds.coords is not None:
        header += ["cx", "cy"]
    if ds.true_labels is not None:
        header += ["label"]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(header)
    for r in range(ds.n):
        row = [_fmt(v) for v in ds.X[r]]
        if ds.coords is not None:
            row += [_fmt(v) for v in ds.coords[r]]
        if ds.true_labels is not None:
            row.append(str(int(ds.true_labels[r])))
        w.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_table(path, delimiter=None) -> Dataset:
    """Read a delimiter-separated table (comma or tab, detected from the header)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise TableFormatError("line 1: empty file")
    if delimiter is None:
        delimiter = "\t" if lines[0].count("\t") > lines[0].count(",") else ","
    reader = csv.reader(lines, delimiter=delimiter)
    header = [h.strip() for h in next(reader)]
    feat = [c for c in header if c.startswith("x") and c[1:].isdigit()]
    feat_cols = [header.index(f"x{j}") for j in range(len(feat)) if f"x{j}" in header]
    if len(feat_cols) != len(feat) or not feat:
        raise TableFormatError("line 1: feature columns must be x0..x{d-1}")
    has_coords = "cx" in header and "cy" in header
    has_label = "label" in header
    X, C, y = [], [], []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise TableFormatError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
        try:
            X.append([float(row[c]) for c in feat_cols])
            if has_coords:
                C.append([float(row[header.index("cx")]), float(row[header.index("cy")])])
            if has_label:
                y.append(int(row[header.index("label")]))
        except ValueError as exc:
            raise TableFormatError(f"line {line_no}: non-numeric cell ({exc})") from None
    if not X:
        raise TableFormatError("line 2: no data rows")
    return Dataset(np.array(X), np.array(C) if has_coords else None,
                   np.array(y) if has_label else None)


def save_quadratic(inst: QuadraticInstance, path, delimiter=","):
    """One row per sample: ``d_phi, d_lambda``, row-major ``Q_i`` then ``v_i``."""
    D = inst.d_phi + inst.d_lambda
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["d_phi", "d_lambda"] + [f"q{a}_{b}" for a in range(D) for b in range(D)]
               + [f"v{a}" for a in range(D)])
    for i in range(inst.n):
        w.writerow([inst.d_phi, inst.d_lambda] + [_fmt(x) for x in inst.Q[i].ravel()]
                   + [_fmt(x) for x in inst.v[i]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_quadratic(path, delimiter=",") -> QuadraticInstance:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = list(csv.reader(lines, delimiter=delimiter))
    if len(rows) < 2:
        raise TableFormatError("line 2: no data rows")
    try:
        d_phi, d_lam = int(rows[1][0]), int(rows[1][1])
    except (ValueError, IndexError):
        raise TableFormatError("line 2: bad dimension fields") from None
    D = d_phi + d_lam
    Q, v = [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != 2 + D * D + D:
            raise TableFormatError(f"line {line_no}: expected {2 + D * D + D} fields, got {len(row)}")
        try:
            vals = np.array(row[2:], dtype=float)
        except ValueError as exc:
            raise TableFormatError(f"line {line_no}: non-numeric cell ({exc})") from None
        Q.append(vals[: D * D].reshape(D, D))
        v.append(vals[D * D:])
    return QuadraticInstance(np.array(Q), np.array(v), d_phi, d_lam)


def preprocess(ds: Dataset, spec: PreprocessSpec) -> Dataset:
    """Feature selection, depth normalisation, log transform, standardise and clip."""
    X = np.asarray(ds.X, float)
    if spec.top_features is not None and spec.top_features > X.shape[1]:
        raise ValueError("top_features exceeds the number of features")
    var = X.var(axis=0)
    order = np.argsort(-var, kind="stable")
    order = order[var[order] > 0]
    if spec.top_features is not None:
        order = order[: spec.top_features]
    X = X[:, np.sort(order)]
    if spec.normalize_depth:
        if np.any(X < 0):
            raise ValueError("depth normalisation needs non-negative counts")
        depth = X.sum(axis=1, keepdims=True)
        target = np.median(depth[depth > 0]) if np.any(depth > 0) else 1.0
        X = np.divide(X * target, depth, out=np.zeros_like(X), where=depth > 0)
    if spec.log1p:
        X = np.log1p(X)
    sd = X.std(axis=0)
    X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    X = np.clip(X, -spec.scale_clip, spec.scale_clip)
    return Dataset(X, ds.coords, ds.true_labels, ds.true_mixture)


# -- presets -----------------------------------------------------------------------

PRESETS = {
    "quad-desk": dict(kind="quadratic", n=200, d_phi=5, d_lambda=5, cond=1000.0, batch_size=20),
    "quad-full": dict(kind="quadratic", n=10_000, d_phi=5, d_lambda=5, cond=1000.0, batch_size=1000),
    "quad-blocks": dict(kind="quadratic", n=100, d_phi=4, d_lambda=6, cond=3.0, batch_size=10,
                        block_dims=(3, 3), block_scales=(1.0, 1000.0)),
    "gmm-desk": dict(kind="gmm", n=10_000, K=5, d=10, batch_size=100, bias=0.9),
    "gmm-full": dict(kind="gmm", n=100_000, K=5, d=10, batch_size=1000, bias=0.9),
    "spatial-desk": dict(kind="spatial", n_side=40, K=4, d=10, separation=20.0, patches=30,
                         k=6, tau=0.5),
}
