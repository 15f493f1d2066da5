"""Loop-level brute-force references for the geometry kernels.

These are the oracles the vectorized kernels in :mod:`p4p.geometry` are
tested (and benchmarked) against. They stay deliberately naive: plain
Python loops, one distance at a time, float64 throughout, and the same
documented tie-breaks. Do not optimize this file.
"""

from __future__ import annotations

import numpy as np


def _sqdist(a, b) -> float:
    dx = float(a[0]) - float(b[0])
    dy = float(a[1]) - float(b[1])
    dz = float(a[2]) - float(b[2])
    return dx * dx + dy * dy + dz * dz


def fps_reference(positions: np.ndarray, n_samples: int, start: int = 0) -> list[int]:
    """O(n_samples * N) greedy scan; ties broken by lowest index.

    Selected indices are marked with -1 so exact duplicate points can
    never re-select an index (the output stays distinct).
    """
    n = positions.shape[0]
    selected = [int(start)]
    min_d = [_sqdist(positions[j], positions[start]) for j in range(n)]
    min_d[start] = -1.0
    while len(selected) < n_samples:
        best, best_d = 0, -2.0
        for j in range(n):
            if min_d[j] > best_d:  # strict: keeps the lowest index on ties
                best, best_d = j, min_d[j]
        selected.append(best)
        for j in range(n):
            d = _sqdist(positions[j], positions[best])
            if d < min_d[j]:
                min_d[j] = d
        min_d[best] = -1.0
    return selected


def knn_reference(positions: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Exhaustive distance sort per center; (distance, index) ordering."""
    n = positions.shape[0]
    rows = []
    for c in centers:
        dists = [(_sqdist(positions[j], c), j) for j in range(n)]
        dists.sort()
        idx = [j for _, j in dists[:k]]
        while len(idx) < k:
            idx.append(idx[0])
        rows.append(idx)
    return np.array(rows, dtype=np.int64)


def three_nn_weights_reference(source_pos: np.ndarray, query_pos: np.ndarray,
                               eps: float = 1e-8):
    """Indices and normalized inverse-distance weights of the 3 nearest sources.

    With fewer than 3 sources the index rows are padded, but padded slots
    get zero weight so no source is counted twice.
    """
    m = source_pos.shape[0]
    idx = knn_reference(source_pos, query_pos, 3)
    weights = np.zeros((query_pos.shape[0], 3), dtype=np.float64)
    for qi, q in enumerate(query_pos):
        raw = []
        for slot, j in enumerate(idx[qi]):
            if slot >= m:
                raw.append(0.0)
                continue
            d = np.sqrt(_sqdist(source_pos[j], q))
            raw.append(1.0 / (d + eps))
        total = sum(raw)
        weights[qi] = [w / total for w in raw]
    return idx, weights


def interpolate_3nn_reference(source_pos, source_feat, query_pos,
                              eps: float = 1e-8) -> np.ndarray:
    idx, w = three_nn_weights_reference(source_pos, query_pos, eps)
    out = np.zeros((query_pos.shape[0], source_feat.shape[1]), dtype=np.float64)
    for qi in range(query_pos.shape[0]):
        for slot in range(3):
            out[qi] += w[qi, slot] * np.asarray(source_feat[idx[qi, slot]], dtype=np.float64)
    return out
