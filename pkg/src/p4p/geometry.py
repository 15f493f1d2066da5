"""Deterministic geometric kernels over raw point sets.

Downsampling (farthest point sampling), neighborhood queries (kNN) and
inverse-distance feature interpolation. All three are pure functions:
identical inputs produce bit-identical outputs on any platform. Distances
are compared as float64 squared distances accumulated component-wise,
which keeps the vectorized kernels bit-equal to the loop references in
:mod:`p4p.geometry_reference`, and ties always resolve to the lowest
index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

INTERP_EPS = 1e-8


@dataclass(frozen=True)
class PointCloud:
    """N points: 3D positions, optional per-point features, optional labels.

    ``labels`` is either one integer class id for the whole cloud or an
    (N,) integer array of per-point ids.
    """

    positions: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | int | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ShapeError(f"positions must be (N>=1, 3), got {pos.shape}")
        if not np.issubdtype(pos.dtype, np.floating):
            pos = pos.astype(np.float64)
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain non-finite values")
        object.__setattr__(self, "positions", pos)
        if self.features is not None:
            feat = np.asarray(self.features)
            if feat.ndim != 2 or feat.shape[0] != pos.shape[0]:
                raise ShapeError(
                    f"features must be ({pos.shape[0]}, C_in), got {feat.shape}")
            if not np.all(np.isfinite(feat)):
                raise ValueError("features contain non-finite values")
            object.__setattr__(self, "features", feat)
        if self.labels is not None and not np.isscalar(self.labels):
            lab = np.asarray(self.labels)
            if lab.shape != (pos.shape[0],):
                raise ShapeError(
                    f"per-point labels must be ({pos.shape[0]},), got {lab.shape}")
            object.__setattr__(self, "labels", lab.astype(np.int64))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def c_in(self) -> int:
        return 0 if self.features is None else self.features.shape[1]


@dataclass(frozen=True)
class NeighborIndex:
    """k neighbors per center, indices into the source cloud.

    ``center_ids`` is present when centers were chosen from the source
    cloud (the FPS path) and None for free query coordinates. Rows of
    ``neighbor_ids`` are ascending by distance, then by index; duplicates
    appear only when the source has fewer than k distinct points.
    """

    neighbor_ids: np.ndarray
    center_ids: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.neighbor_ids.shape[1]

    def validate(self, n_source: int) -> None:
        ids = self.neighbor_ids
        if ids.min() < 0 or ids.max() >= n_source:
            raise ValueError("neighbor ids out of range")
        if self.center_ids is not None:
            c = self.center_ids
            if len(c) != ids.shape[0] or c.min() < 0 or c.max() >= n_source:
                raise ValueError("center ids out of range")


def _positions64(positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) coordinates, got {pos.shape}")
    if pos.shape[0] == 0:
        raise ValueError("empty point set")
    if not np.all(np.isfinite(pos)):
        raise ValueError("coordinates contain non-finite values")
    return pos


def _sqdist_to(pos: np.ndarray, center: np.ndarray) -> np.ndarray:
    # Component-wise accumulation; the loop oracle uses the same order.
    d = pos - center
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def farthest_point_sample(cloud: PointCloud | np.ndarray, n_samples: int,
                          start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Each selected point maximizes the minimum distance to everything
    chosen so far; ties break to the lowest index, and already-selected
    indices are never re-chosen (exact duplicate points stay distinct).
    """
    pos = _positions64(cloud.positions if isinstance(cloud, PointCloud) else cloud)
    n = pos.shape[0]
    if not 1 <= n_samples <= n:
        raise ValueError(f"insufficient points: requested {n_samples} of {n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range [0, {n})")
    selected = np.empty(n_samples, dtype=np.int64)
    selected[0] = start
    min_d = _sqdist_to(pos, pos[start])
    min_d[start] = -1.0  # marks selected; real distances are >= 0
    for i in range(1, n_samples):
        best = int(np.argmax(min_d))
        selected[i] = best
        np.minimum(min_d, _sqdist_to(pos, pos[best]), out=min_d)
        min_d[best] = -1.0
    return selected


def knn_query(cloud: PointCloud | np.ndarray, centers: np.ndarray,
              k: int) -> NeighborIndex:
    """k nearest source points per center, sorted by (distance, index).

    When the source has fewer than k points, the nearest point is
    repeated to fill the row.
    """
    pos = _positions64(cloud.positions if isinstance(cloud, PointCloud) else cloud)
    centers = _positions64(centers)
    if k < 1:
        raise ValueError("k must be >= 1")
    n = pos.shape[0]
    d = centers[:, None, :] - pos[None, :, :]
    d2 = d[:, :, 0] * d[:, :, 0] + d[:, :, 1] * d[:, :, 1] + d[:, :, 2] * d[:, :, 2]
    order = np.argsort(d2, axis=1, kind="stable")
    if n >= k:
        ids = order[:, :k]
    else:
        pad = np.repeat(order[:, :1], k - n, axis=1)
        ids = np.concatenate([order, pad], axis=1)
    return NeighborIndex(neighbor_ids=ids.astype(np.int64))


def knn_for_centers(cloud: PointCloud, center_ids: np.ndarray, k: int) -> NeighborIndex:
    """kNN around centers taken from the cloud itself (FPS output)."""
    nb = knn_query(cloud, cloud.positions[center_ids], k)
    return NeighborIndex(neighbor_ids=nb.neighbor_ids,
                         center_ids=np.asarray(center_ids, dtype=np.int64))


def three_nn_weights(source_pos: np.ndarray, query_pos: np.ndarray,
                     eps: float = INTERP_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Indices and normalized 1/(d+eps) weights of the 3 nearest sources.

    With fewer than 3 sources the index rows are padded, but padded slots
    get zero weight so no source is counted twice.
    """
    src = _positions64(source_pos)
    nb = knn_query(src, query_pos, 3)
    q = _positions64(query_pos)
    gathered = src[nb.neighbor_ids]  # (Q, 3, 3)
    d = gathered - q[:, None, :]
    d2 = d[:, :, 0] * d[:, :, 0] + d[:, :, 1] * d[:, :, 1] + d[:, :, 2] * d[:, :, 2]
    w = 1.0 / (np.sqrt(d2) + eps)
    if src.shape[0] < 3:
        w[:, src.shape[0]:] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    return nb.neighbor_ids, w


def interpolate_3nn(source_pos: np.ndarray, source_feat: np.ndarray,
                    query_pos: np.ndarray, eps: float = INTERP_EPS) -> np.ndarray:
    """Inverse-distance-weighted average of the 3 nearest source features.

    A query that coincides with a source point converges to that source's
    feature (its weight approaches 1/eps before normalization).
    """
    source_feat = np.asarray(source_feat)
    if source_feat.ndim != 2 or source_feat.shape[1] == 0:
        raise ShapeError(f"source features must be (M, C>=1), got {source_feat.shape}")
    if source_feat.shape[0] != np.asarray(source_pos).shape[0]:
        raise ShapeError("source positions and features disagree on M")
    idx, w = three_nn_weights(source_pos, query_pos, eps)
    out = np.einsum("qk,qkc->qc", w, source_feat[idx].astype(np.float64))
    return out.astype(source_feat.dtype)
