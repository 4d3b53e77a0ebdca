"""Index computations on point sets: FPS, exact kNN, inverse-distance interpolation.

None of these are differentiable w.r.t. coordinates; ``knn_interpolate`` is
differentiable w.r.t. the coarse features only (weights are constants).
Distances are brute force, evaluated in query blocks to bound memory.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, gather

INTERP_EPS = 1e-8
_BLOCK = 1024


def as_points(points) -> np.ndarray:
    """Validate an ``[N, 3]`` coordinate array (finite, N >= 1)."""
    pts = np.asarray(points.data if isinstance(points, Tensor) else points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected points of shape [N, 3], got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("point set is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates contain NaN or Inf")
    return pts


def _sq_dist(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    # difference form, not the |a|^2+|b|^2-2ab expansion: exact zeros and ties survive
    diff = queries[:, None, :] - refs[None, :, :]
    return np.einsum("qrc,qrc->qr", diff, diff)


def farthest_point_sampling(points, count: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min selection of ``count`` indices starting at ``seed_index``.

    Each new index maximizes the minimum distance to everything already
    selected; ties go to the lowest index.
    """
    pts = as_points(points).astype(np.float64, copy=False)
    n = pts.shape[0]
    if not 1 <= count <= n:
        raise ValueError(f"FPS count must be in [1, {n}], got {count}")
    if not 0 <= seed_index < n:
        raise IndexError(f"seed_index {seed_index} out of range for {n} points")
    selected = np.empty(count, dtype=np.int64)
    selected[0] = seed_index
    diff = pts - pts[seed_index]
    mind = np.einsum("nc,nc->n", diff, diff)
    for i in range(1, count):
        # argmax returns the first occurrence, i.e. the lowest tied index
        nxt = int(np.argmax(mind))
        selected[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(mind, np.einsum("nc,nc->n", diff, diff), out=mind)
    return selected


def canonical_seed(points) -> int:
    """Index of the lexicographically smallest point (x, then y, then z).

    Depends only on the point set, not its ordering, so FPS seeded here is
    permutation equivariant for sets without duplicate points.
    """
    pts = as_points(points)
    return int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])


def _topk_sorted(d2: np.ndarray, k: int) -> np.ndarray:
    n_ref = d2.shape[1]
    if k == n_ref:
        return np.argsort(d2, axis=1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    rows = np.arange(d2.shape[0])[:, None]
    kth = d2[rows, part].max(axis=1)
    # a tie at the k-th distance can make argpartition pick a higher index
    n_le = (d2 <= kth[:, None]).sum(axis=1)
    out = np.empty((d2.shape[0], k), dtype=np.int64)
    clean = n_le == k
    if clean.any():
        cand = part[clean]
        cd = d2[clean][np.arange(cand.shape[0])[:, None], cand]
        order = np.lexsort((cand, cd), axis=1)
        out[clean] = np.take_along_axis(cand, order, axis=1)
    for r in np.nonzero(~clean)[0]:
        out[r] = np.argsort(d2[r], kind="stable")[:k]
    return out


def knn(queries, refs, k: int, include_self: bool = True) -> np.ndarray:
    """Exact k nearest neighbours of every query among ``refs``.

    Rows are sorted by ascending distance, ties by ascending index. With
    ``include_self=False`` the queries must be the reference set itself and
    each point's own index is excluded.
    """
    q = as_points(queries).astype(np.float64, copy=False)
    r = as_points(refs).astype(np.float64, copy=False)
    n_ref = r.shape[0]
    if not include_self:
        if q.shape != r.shape:
            raise ValueError("include_self=False requires queries to be the reference set")
        limit = n_ref - 1
    else:
        limit = n_ref
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} exceeds available neighbours ({limit})")
    return _knn_rows(q, r, k, exclude_self=not include_self)


def knn_features(queries: np.ndarray, refs: np.ndarray, k: int) -> np.ndarray:
    """kNN in an arbitrary feature space (rows of ``[N, C]`` arrays)."""
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    if q.ndim != 2 or r.ndim != 2 or q.shape[1] != r.shape[1]:
        raise ValueError(f"incompatible feature arrays {q.shape} and {r.shape}")
    if not 1 <= k <= r.shape[0]:
        raise ValueError(f"k={k} exceeds available neighbours ({r.shape[0]})")
    return _knn_rows(q, r, k, exclude_self=False)


def _knn_rows(q: np.ndarray, r: np.ndarray, k: int, exclude_self: bool) -> np.ndarray:
    out = np.empty((q.shape[0], k), dtype=np.int64)
    for start in range(0, q.shape[0], _BLOCK):
        stop = min(start + _BLOCK, q.shape[0])
        d2 = _sq_dist(q[start:stop], r)
        if exclude_self:
            d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = _topk_sorted(d2, k)
    return out


def interpolation_weights(coarse_pos, fine_pos, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour indices ``[N, k]`` and normalized inverse-distance weights ``[N, k]``."""
    c = as_points(coarse_pos).astype(np.float64, copy=False)
    f = as_points(fine_pos).astype(np.float64, copy=False)
    if k > c.shape[0]:
        raise ValueError(f"interpolation k={k} exceeds coarse set size {c.shape[0]}")
    idx = knn(f, c, k)
    diff = f[:, None, :] - c[idx]
    dist = np.sqrt(np.einsum("nkc,nkc->nk", diff, diff))
    inv = 1.0 / (dist + INTERP_EPS)
    return idx, inv / inv.sum(axis=1, keepdims=True)


def knn_interpolate(coarse_feats: Tensor, coarse_pos, fine_pos, k: int = 3) -> Tensor:
    """Inverse-distance weighted average of the k nearest coarse features."""
    if coarse_feats.shape[0] == 0:
        raise ValueError("cannot interpolate from an empty coarse set")
    if coarse_feats.shape[0] != np.asarray(coarse_pos).shape[0]:
        raise ValueError("coarse features and positions disagree on point count")
    idx, w = interpolation_weights(coarse_pos, fine_pos, k)
    w = Tensor(w[:, :, None].astype(coarse_feats.dtype), dtype=coarse_feats.dtype)
    return (gather(coarse_feats, idx) * w).sum(axis=1)
