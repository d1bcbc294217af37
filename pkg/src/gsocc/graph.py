"""Geometric KNN and semantic top-M neighbor graphs over Gaussian sets.

Row conventions shared by every builder here:

* the query node itself is always at rank 0;
* remaining entries are ordered by distance (ascending) or cosine
  similarity (descending), ties broken by ascending node id.

Squared distances are always evaluated as ``sum_c (a_c - b_c)**2`` in
coordinate order, so the brute-force and the tree-accelerated paths see
bit-identical keys and agree exactly, ties included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import InvalidParameterError, NumericInputError
from .scene import GaussianSet

BRUTE_FORCE_MAX_N = 1024
_ROW_BLOCK = 256


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    kind: str
    idx: np.ndarray
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.kind not in ("geometric", "semantic", "dense"):
            raise InvalidParameterError(f"unknown neighbor kind {self.kind!r}")
        idx = np.ascontiguousarray(self.idx, dtype=np.int64)
        object.__setattr__(self, "idx", idx)
        if self.mask is not None:
            mask = np.ascontiguousarray(self.mask, dtype=bool)
            if mask.shape != idx.shape:
                raise InvalidParameterError("mask must match idx shape")
            object.__setattr__(self, "mask", mask)

    @property
    def width(self) -> int:
        return self.idx.shape[1]

    @property
    def N(self) -> int:
        return self.idx.shape[0]

    def truncate(self, width: int) -> "NeighborIndex":
        """First ``width`` columns; equals rebuilding with the smaller K/M."""
        mask = None if self.mask is None else self.mask[:, :width]
        return NeighborIndex(self.kind, self.idx[:, :width], mask)


def _sq_dist_block(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, 0] - b[None, :, 0]
    out = diff * diff
    for c in range(1, a.shape[1]):
        diff = a[:, None, c] - b[None, :, c]
        out += diff * diff
    return out


def _dot_block(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Fixed coordinate order instead of BLAS: a pair's value then never depends
    # on its position in the block, so duplicated rows tie exactly.
    out = np.zeros((a.shape[0], b.shape[0]))
    tmp = np.empty_like(out)
    aT, bT = np.ascontiguousarray(a.T), np.ascontiguousarray(b.T)
    for c in range(a.shape[1]):
        np.multiply(aT[c][:, None], bT[c][None, :], out=tmp)
        out += tmp
    return out


def _unit_rows(f: np.ndarray, eps: float) -> np.ndarray:
    norms = np.maximum(np.sqrt(_dot_rows(f)), eps)
    return f / norms[:, None]


def _dot_rows(f: np.ndarray) -> np.ndarray:
    out = np.zeros(f.shape[0])
    for c in range(f.shape[1]):
        out += f[:, c] * f[:, c]
    return out


def pairwise_sq_dist(means) -> np.ndarray:
    """All pairwise squared Euclidean distances, exactly symmetric, zero diagonal."""
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 1:
        raise InvalidParameterError("means must be a non-empty (N, C) array")
    n = means.shape[0]
    out = _sq_dist_block(means, means)
    # (a-b)^2 == (b-a)^2 in IEEE arithmetic, so the matrix is already exactly
    # symmetric; the diagonal is exactly 0 because a-a == 0.
    np.fill_diagonal(out, 0.0)
    assert out.shape == (n, n)
    return out


def _check_width(width: int, n: int, name: str) -> int:
    width = int(width)
    if width < 1 or width > n:
        raise InvalidParameterError(f"{name}={width} must satisfy 1 <= {name} <= N={n}")
    return width


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericInputError(f"{name} contain non-finite values")


def _rank_rows(keys: np.ndarray, rows: np.ndarray, width: int) -> np.ndarray:
    """Order each key row ascending with ties by column id, self forced first."""
    keys = keys.copy()
    n_cols = keys.shape[1]
    keys[np.arange(len(rows)), rows] = -np.inf
    if width >= n_cols // 4:
        return np.argsort(keys, axis=1, kind="stable")[:, :width]
    # Every entry tied with or below the width-th key is a candidate; the C
    # smallest of each row contain all of them, and a lexsort over those
    # reproduces the full stable argsort on the first ``width`` columns.
    kth = np.partition(keys, width - 1, axis=1)[:, width - 1:width]
    C = int(np.max(np.sum(keys <= kth, axis=1)))
    cand = np.argpartition(keys, C - 1, axis=1)[:, :C] if C < n_cols else np.tile(
        np.arange(n_cols), (len(rows), 1))
    ck = np.take_along_axis(keys, cand, axis=1)
    order = np.lexsort((cand, ck), axis=1)
    return np.take_along_axis(cand, order, axis=1)[:, :width]


def _knn_brute(means: np.ndarray, K: int) -> np.ndarray:
    n = means.shape[0]
    out = np.empty((n, K), dtype=np.int64)
    for start in range(0, n, _ROW_BLOCK):
        rows = np.arange(start, min(start + _ROW_BLOCK, n))
        d = _sq_dist_block(means[rows], means)
        out[rows] = _rank_rows(d, rows, K)
    return out


def _knn_tree(means: np.ndarray, K: int) -> np.ndarray:
    n = means.shape[0]
    tree = cKDTree(means)
    extra = min(n, K + 8)
    _, cand = tree.query(means, k=extra)
    cand = np.asarray(cand, dtype=np.int64).reshape(n, extra)
    # Exact keys for the candidates, with the same arithmetic as brute force.
    diff = means[cand] - means[:, None, :]
    d = diff[..., 0] * diff[..., 0]
    for c in range(1, means.shape[1]):
        d += diff[..., c] * diff[..., c]
    rows = np.arange(n)
    d[cand == rows[:, None]] = -np.inf
    order = np.lexsort((cand, d), axis=1)
    d_sorted = np.take_along_axis(d, order, axis=1)
    out = np.take_along_axis(cand, order, axis=1)[:, :K]
    if extra == n:
        return out
    # Rows whose candidate list might have cut through a tie (or whose tree
    # distances disagree with exact keys at the boundary) are redone exactly.
    kth = d_sorted[:, K - 1]
    last = d_sorted[:, -1]
    risky = ~(last > kth * (1 + 1e-9) + 1e-300)
    if np.any(risky):
        bad = np.flatnonzero(risky)
        for start in range(0, len(bad), _ROW_BLOCK):
            r = bad[start:start + _ROW_BLOCK]
            out[r] = _rank_rows(_sq_dist_block(means[r], means), r, K)
    return out


def knn_geometric(means, K: int, method: str = "auto") -> NeighborIndex:
    """K nearest means per node (self first), by exact squared distance."""
    means = np.asarray(means, dtype=np.float64)
    n = means.shape[0]
    K = _check_width(K, n, "K")
    _check_finite(means, "means")
    if method == "auto":
        method = "brute" if n <= BRUTE_FORCE_MAX_N else "tree"
    if method == "brute":
        idx = _knn_brute(means, K)
    elif method == "tree":
        idx = _knn_tree(means, K)
    else:
        raise InvalidParameterError(f"unknown knn method {method!r}")
    return NeighborIndex("geometric", idx)


def knn_adaptive_radius(
    G: GaussianSet, K: int, rho: float = 3.0, K_min: int = 4, base: NeighborIndex | None = None
) -> NeighborIndex:
    """Plain KNN filtered to a per-node radius ``rho * mean(scale_i)``.

    Rows keep self plus the non-self neighbors inside the radius; a row with
    fewer than ``K_min`` survivors (self included) falls back to plain KNN.
    Short rows are padded with their last valid entry and the padding is
    flagged ``False`` in ``mask``.
    """
    n = G.N
    K = _check_width(K, n, "K")
    K_min = int(K_min)
    if not 1 <= K_min <= K:
        raise InvalidParameterError("K_min must satisfy 1 <= K_min <= K")
    if not rho > 0:
        raise InvalidParameterError("rho must be positive")
    means = G.mean
    idx = (base.idx[:, :K] if base is not None else knn_geometric(means, K).idx).copy()
    diff = means[idx] - means[:, None, :]
    d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    r = rho * G.scale.mean(axis=1)
    keep = d <= (r * r)[:, None]
    keep[:, 0] = True
    # Rows are sorted by distance, so survivors form a prefix.
    count = keep.sum(axis=1)
    fallback = count < K_min
    keep[fallback] = True
    count[fallback] = K
    mask = np.arange(K)[None, :] < count[:, None]
    last = idx[np.arange(n), count - 1]
    idx = np.where(mask, idx, last[:, None])
    return NeighborIndex("geometric", idx, mask)


def cosine_similarity(features, eps: float = 1e-12) -> np.ndarray:
    fn = _unit_rows(np.asarray(features, dtype=np.float64), eps)
    return _dot_block(fn, fn)


def cosine_topM(features, M: int, eps: float = 1e-12) -> NeighborIndex:
    """Top-M most cosine-similar nodes per node (self first, then descending)."""
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    M = _check_width(M, n, "M")
    if not eps > 0:
        raise InvalidParameterError("eps must be positive")
    _check_finite(f, "features")
    fn = _unit_rows(f, eps)
    out = np.empty((n, M), dtype=np.int64)
    for start in range(0, n, _ROW_BLOCK):
        rows = np.arange(start, min(start + _ROW_BLOCK, n))
        sim = _dot_block(fn[rows], fn)
        out[rows] = _rank_rows(-sim, rows, M)
    return NeighborIndex("semantic", out)


def dense_index(n_queries: int, n_keys: int) -> NeighborIndex:
    """Every query sees every key; used by full cross attention."""
    return NeighborIndex("dense", np.broadcast_to(np.arange(n_keys), (n_queries, n_keys)))
