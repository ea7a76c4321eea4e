"""Independent reference computations shared by the unit and acceptance tests."""

import itertools

import numpy as np


def best_partition_inertia(x: np.ndarray, K: int) -> float:
    """Minimum within-cluster sum of squares over every labeling into <= K groups.

    Labelings with empty groups are included; they never beat the best K-group
    partition when n >= K, so the minimum equals the optimum over exact K-partitions.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    labels = np.array(list(itertools.product(range(K), repeat=n)), dtype=np.int64)
    onehot = labels[:, :, None] == np.arange(K)[None, None, :]  # (A, n, K)
    counts = onehot.sum(1)  # (A, K)
    sums = np.einsum("ank,nd->akd", onehot.astype(np.float64), x)
    explained = np.where(counts > 0, (sums ** 2).sum(-1) / np.maximum(counts, 1), 0.0).sum(-1)
    return float((x ** 2).sum() - explained.max())


def brute_nearest(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """First index of the minimum exact squared distance, computed point by point."""
    out = np.empty(len(x), dtype=np.int64)
    for i, v in enumerate(np.asarray(x, dtype=np.float64)):
        d = ((np.asarray(c, dtype=np.float64) - v) ** 2).sum(1)
        out[i] = int(np.flatnonzero(d == d.min())[0])
    return out
