"""Locally linear embedding of Poincare-section data.

Each point is reconstructed from its K nearest neighbors with weights that
solve the regularized Gram system (C + delta tr(C)/K I) w = 1, normalized
to sum 1. Global coordinates minimize the same reconstruction error: they
are the eigenvectors of M = (I-W)^T (I-W) for the smallest nonzero
eigenvalues, obtained with a sparse shift-invert eigensolver. Coordinates
are sign-fixed (positive correlation with the first ambient coordinate)
and rescaled to span exactly [0, 1].
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh, ArpackNoConvergence
from scipy.spatial import cKDTree

__all__ = [
    "LleConfig",
    "EmbeddingModel",
    "InverseMap",
    "knn",
    "local_weights",
    "embed",
    "transform_out_of_sample",
    "build_inverse",
    "save_model",
    "load_model",
]

BRUTE_FORCE_MAX = 2000   # exact brute-force kNN below this size
DENSE_EIG_MAX = 5000     # dense eigensolver allowed below this size


@dataclass(frozen=True)
class LleConfig:
    K: int
    delta: float = 1e-3   # regularization (the figure captions' epsilon)
    d_r: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.d_r < 1:
            raise ValueError("embedding dimension d_r must be >= 1")
        if self.K < self.d_r + 1:
            raise ValueError("need K >= d_r + 1 neighbors")
        if self.delta <= 0:
            raise ValueError("regularization delta must be positive")


def knn(points: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K nearest distinct other points, for every point.

    Exact. Ties are broken by index order (brute-force path; the k-d tree
    path is used for large float datasets where ties have measure zero).
    Raises if some point has more than K exact duplicates, which would make
    its neighborhood degenerate.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if K >= n:
        raise ValueError(f"K={K} must be smaller than the number of points {n}")
    if n <= BRUTE_FORCE_MAX:
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        idx = np.argsort(d2, axis=1, kind="stable")[:, :K]
        dK = np.take_along_axis(d2, idx[:, -1:], axis=1)[:, 0]
    else:
        tree = cKDTree(pts)
        dist, idx_full = tree.query(pts, k=K + 1)
        self_col = idx_full == np.arange(n)[:, None]
        # drop the self match when present, else the farthest of the K+1
        keep = np.ones_like(idx_full, dtype=bool)
        has_self = self_col.any(axis=1)
        keep[has_self] = ~self_col[has_self]
        keep[~has_self, -1] = False
        idx = idx_full[keep].reshape(n, K)
        dK = dist[keep].reshape(n, K)[:, -1]
    degenerate = np.nonzero(dK == 0.0)[0]
    if degenerate.size:
        raise ValueError(
            f"{degenerate.size} points have more than K={K} exact duplicates "
            f"(first at index {degenerate[0]})")
    return idx


def local_weights(point: np.ndarray, neighbor_points: np.ndarray,
                  delta: float) -> np.ndarray:
    """Reconstruction weights of one point from its neighbors."""
    w = _weights_batch(np.asarray(point, float)[None, :],
                       np.asarray(neighbor_points, float)[None, :, :], delta)
    return w[0]


def _weights_batch(points: np.ndarray, neighbors: np.ndarray,
                   delta: float) -> np.ndarray:
    """Vectorized weight solve for a batch: points (c, d), neighbors (c, K, d)."""
    c, K, _ = neighbors.shape
    Z = neighbors - points[:, None, :]
    C = np.einsum("cij,ckj->cik", Z, Z)
    tr = np.trace(C, axis1=1, axis2=2)
    reg = np.where(tr > 0, delta * tr / K, delta)
    C[:, np.arange(K), np.arange(K)] += reg[:, None]
    try:
        w = np.linalg.solve(C, np.ones((c, K, 1)))[:, :, 0]
    except np.linalg.LinAlgError:  # pragma: no cover - delta > 0 prevents this
        raise AssertionError("regularized local Gram system was singular")
    return w / w.sum(axis=1, keepdims=True)


@dataclass
class EmbeddingModel:
    training_points: np.ndarray      # (N, d) ambient section states
    neighbor_indices: np.ndarray     # (N, K)
    weights: sp.csr_matrix           # (N, N) row-stochastic, sparse
    coords: np.ndarray               # (N, d_r), each column spans [0, 1]
    eigenvalues: np.ndarray          # (d_r,) matching coords columns
    config: LleConfig
    meta: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return self.training_points.shape[0]


def _pick_coords(vals: np.ndarray, vecs: np.ndarray, d_r: int):
    """Drop the constant eigenvector by component variance, keep d_r coords."""
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    variances = vecs.var(axis=0)
    const = int(np.argmin(variances))
    rest = [i for i in range(len(vals)) if i != const]
    if variances[const] >= 1e-8 * max(variances[i] for i in rest):
        # no clearly constant vector; fall back to eigenvalue order
        const, rest = 0, list(range(1, len(vals)))
    keep = rest[:d_r]
    return vals[keep], vecs[:, keep]


def _smallest_eigenpairs(M: sp.spmatrix, k: int, seed: int):
    n = M.shape[0]
    if n < 500:
        w, v = np.linalg.eigh(M.toarray())
        return w[:k], v[:, :k]
    eps = 1e-10 * float(M.diagonal().mean())
    Mreg = (M + eps * sp.identity(n, format="csc")).tocsc()
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        w, v = eigsh(Mreg, k=k, sigma=0.0, which="LM", v0=v0)
        return w - eps, v
    except (ArpackNoConvergence, RuntimeError) as err:
        if n <= DENSE_EIG_MAX:
            w, v = np.linalg.eigh(M.toarray())
            return w[:k], v[:, :k]
        res = getattr(err, "eigenvalues", None)
        raise RuntimeError(
            f"sparse eigensolver failed to converge (partial eigenvalues: {res})"
        ) from err


def embed(points: np.ndarray, config: LleConfig) -> EmbeddingModel:
    """Train the embedding on an (N, d) array of section states."""
    pts = np.ascontiguousarray(points, dtype=float)
    n, d = pts.shape
    if n <= config.K:
        raise ValueError("need more points than neighbors")
    idx = knn(pts, config.K)

    W_rows = np.empty((n, config.K))
    chunk = max(1, int(2e7 // (config.K * config.K + 1)))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        W_rows[lo:hi] = _weights_batch(pts[lo:hi], pts[idx[lo:hi]], config.delta)

    rows = np.repeat(np.arange(n), config.K)
    W = sp.csr_matrix((W_rows.ravel(), (rows, idx.ravel())), shape=(n, n))
    ImW = (sp.identity(n, format="csr") - W).tocsr()
    M = (ImW.T @ ImW).tocsc()

    vals, vecs = _smallest_eigenpairs(M, config.d_r + 1, config.seed)
    vals, vecs = _pick_coords(vals, vecs, config.d_r)

    # sign: positive correlation with the first ambient coordinate that
    # actually correlates; then affine rescale of each column onto [0, 1]
    coords = np.empty_like(vecs)
    for j in range(vecs.shape[1]):
        v = vecs[:, j]
        sign = 1.0
        for amb in range(d):
            c = np.dot(v - v.mean(), pts[:, amb] - pts[:, amb].mean())
            if abs(c) > 1e-12 * (np.std(v) * np.std(pts[:, amb]) * n + 1e-300):
                sign = 1.0 if c >= 0 else -1.0
                break
        v = sign * v
        lo_, hi_ = v.min(), v.max()
        if hi_ <= lo_:
            raise RuntimeError(f"embedding coordinate {j} is constant")
        coords[:, j] = (v - lo_) / (hi_ - lo_)

    return EmbeddingModel(training_points=pts, neighbor_indices=idx, weights=W,
                          coords=coords, eigenvalues=vals, config=config)


def transform_out_of_sample(model: EmbeddingModel, new_point: np.ndarray) -> np.ndarray:
    """Embed points not in the training set via local reconstruction weights.

    Accepts a single point (d,) or a batch (m, d); returns (d_r,) or (m, d_r).
    """
    x = np.asarray(new_point, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    K = model.config.K
    tree = model.meta.get("_tree")
    if tree is None:
        tree = cKDTree(model.training_points)
        model.meta["_tree"] = tree
    _, idx = tree.query(X, k=K)
    if K == 1:
        idx = idx[:, None]
    w = _weights_batch(X, model.training_points[idx], model.config.delta)
    q = np.einsum("ck,ckj->cj", w, model.coords[idx])
    return q[0] if single else q


@dataclass
class InverseMap:
    """Per-ambient-coordinate interpolants q1 -> x_j over sorted training q1."""

    q: np.ndarray            # sorted, duplicates averaged
    values: np.ndarray       # (len(q), d)
    rule: str = "nearest"    # 'nearest' | 'linear'

    def __call__(self, q1: float) -> np.ndarray:
        state, _ = self.lift(q1)
        return state

    def lift(self, q1: float) -> tuple[np.ndarray, bool]:
        """Ambient state at q1; flags when q1 was clamped to the data range."""
        clamped = bool(q1 < self.q[0] or q1 > self.q[-1])
        qq = min(max(float(q1), float(self.q[0])), float(self.q[-1]))
        if self.rule == "nearest":
            i = int(np.searchsorted(self.q, qq))
            if i >= len(self.q):
                i = len(self.q) - 1
            elif i > 0 and qq - self.q[i - 1] <= self.q[i] - qq:
                i = i - 1
            return self.values[i].copy(), clamped
        out = np.array([np.interp(qq, self.q, self.values[:, j])
                        for j in range(self.values.shape[1])])
        return out, clamped


def build_inverse(model: EmbeddingModel, subset: Optional[np.ndarray] = None,
                  rule: str = "nearest", coord: int = 0) -> InverseMap:
    """Interpolating inverse q1 -> ambient state.

    subset restricts to indices well parametrized by q1 (one tree edge);
    duplicate q1 values are averaged.
    """
    if rule not in ("nearest", "linear"):
        raise ValueError("rule must be 'nearest' or 'linear'")
    q = model.coords[:, coord]
    X = model.training_points
    if subset is not None:
        q, X = q[subset], X[subset]
    order = np.argsort(q, kind="stable")
    q, X = q[order], X[order]
    uq, inverse_idx, counts = np.unique(q, return_inverse=True, return_counts=True)
    if uq.size < q.size:
        sums = np.zeros((uq.size, X.shape[1]))
        np.add.at(sums, inverse_idx, X)
        X = sums / counts[:, None]
        q = uq
    return InverseMap(q=q, values=X, rule=rule)


def save_model(model: EmbeddingModel, path) -> None:
    W = model.weights.tocsr()
    np.savez_compressed(
        path,
        training_points=model.training_points,
        neighbor_indices=model.neighbor_indices,
        weights_data=W.data, weights_indices=W.indices, weights_indptr=W.indptr,
        coords=model.coords,
        eigenvalues=model.eigenvalues,
        K=model.config.K, delta=model.config.delta,
        d_r=model.config.d_r, seed=model.config.seed,
    )


def load_model(path) -> EmbeddingModel:
    z = np.load(path)
    n = z["training_points"].shape[0]
    W = sp.csr_matrix((z["weights_data"], z["weights_indices"], z["weights_indptr"]),
                      shape=(n, n))
    cfg = LleConfig(K=int(z["K"]), delta=float(z["delta"]),
                    d_r=int(z["d_r"]), seed=int(z["seed"]))
    return EmbeddingModel(training_points=z["training_points"],
                          neighbor_indices=z["neighbor_indices"], weights=W,
                          coords=z["coords"], eigenvalues=z["eigenvalues"],
                          config=cfg)


def export_embedding_csv(model: EmbeddingModel, times: np.ndarray, path) -> None:
    """CSV: idx,q1[,q2],t,c1..cd."""
    n, d = model.training_points.shape
    d_r = model.coords.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["idx"] + [f"q{j + 1}" for j in range(d_r)] + ["t"]
                   + [f"c{i + 1}" for i in range(d)])
        for i in range(n):
            w.writerow([i] + [repr(float(v)) for v in model.coords[i]]
                       + [repr(float(times[i]))]
                       + [repr(float(v)) for v in model.training_points[i]])
