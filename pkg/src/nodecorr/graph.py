"""Spatial neighborhoods: exact KNN, dilated rank selection, neighbor gathering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import GraphMismatchError, InsufficientPointsError, ShapeError

__all__ = [
    "PointCloud",
    "DilatedKnnGraph",
    "knn_sorted",
    "dilated_select",
    "build_dilated_knn",
    "gather_neighbors",
    "gather_all",
]


@dataclass
class PointCloud:
    """Positions ``(N, 3)`` with optional per-point extras ``(N, d)`` and integer labels."""

    positions: np.ndarray
    extras: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError(f"positions must be (N, 3), got {self.positions.shape}")
        n = self.positions.shape[0]
        if n < 1:
            raise ShapeError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.extras is not None:
            self.extras = np.asarray(self.extras, dtype=np.float64)
            if self.extras.ndim != 2 or self.extras.shape[0] != n:
                raise ShapeError(f"extras must be (N, d) with N={n}, got {self.extras.shape}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
            if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0):
                raise ValueError("labels must be non-negative integers")
            self.labels = labels.astype(np.int64)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def n_extras(self) -> int:
        return 0 if self.extras is None else self.extras.shape[1]

    def features(self) -> np.ndarray:
        """Per-point input features: xyz followed by the extras."""
        if self.extras is None:
            return self.positions
        return np.hstack([self.positions, self.extras])

    def permuted(self, perm: np.ndarray) -> "PointCloud":
        """Cloud whose point ``perm[i]`` is this cloud's point ``i``."""
        inv = np.argsort(perm)
        return PointCloud(
            self.positions[inv],
            None if self.extras is None else self.extras[inv],
            None if self.labels is None else self.labels[inv],
        )


@dataclass(frozen=True)
class DilatedKnnGraph:
    k: int
    dilation: int
    neighbors: np.ndarray  # (N, K) int64

    @property
    def n_nodes(self) -> int:
        return self.neighbors.shape[0]


def _sq_dists(positions: np.ndarray, i: int) -> np.ndarray:
    diff = positions - positions[i]
    return (diff * diff).sum(axis=1)


def knn_sorted(cloud: PointCloud, i: int, count: int) -> np.ndarray:
    """Indices of the ``count`` nearest points to point ``i``, nearest first.

    The query point is excluded; equal distances resolve to the lower index.
    """
    n = cloud.n_points
    if count > n - 1:
        raise InsufficientPointsError(f"asked for {count} neighbors but only {n - 1} candidates")
    d = _sq_dists(cloud.positions, i)
    d[i] = np.inf
    # stable sort keeps ascending index order within equal distances
    order = np.argsort(d, kind="stable")
    return order[:count]


def dilated_select(sorted_idx, k: int, dilation: int) -> np.ndarray:
    """Pick ranks ``d, 2d, ..., K*d`` (1-based) from a nearest-first index list."""
    sorted_idx = np.asarray(sorted_idx)
    if k < 1 or dilation < 1:
        raise ValueError("k and dilation must be >= 1")
    if sorted_idx.shape[0] < k * dilation:
        raise InsufficientPointsError(
            f"need {k * dilation} candidates for K={k}, d={dilation}, got {sorted_idx.shape[0]}"
        )
    return sorted_idx[dilation - 1 : k * dilation : dilation]


def build_dilated_knn(cloud: PointCloud, k: int, dilation: int = 1) -> DilatedKnnGraph:
    n = cloud.n_points
    if n - 1 < k * dilation:
        raise InsufficientPointsError(
            f"N - 1 = {n - 1} is smaller than K * d = {k * dilation}"
        )
    pos = cloud.positions
    neighbors = np.empty((n, k), dtype=np.int64)
    # row blocks bound the (block, N, 3) temporary
    block = max(1, 2_000_000 // (3 * n))
    for start in range(0, n, block):
        stop = min(n, start + block)
        diff = pos[None, :, :] - pos[start:stop, None, :]
        d = (diff * diff).sum(axis=2)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d, axis=1, kind="stable")[:, : k * dilation]
        neighbors[start:stop] = order[:, dilation - 1 :: dilation]
    return DilatedKnnGraph(k, dilation, neighbors)


def _check_graph(nodes: np.ndarray, graph: DilatedKnnGraph) -> None:
    if graph.n_nodes != nodes.shape[0]:
        raise GraphMismatchError(
            f"graph has {graph.n_nodes} rows but node matrix has {nodes.shape[0]}"
        )
    nb = graph.neighbors
    if nb.size and (nb.min() < 0 or nb.max() >= nodes.shape[0]):
        raise GraphMismatchError("neighbor index out of range")


def gather_neighbors(nodes, graph: DilatedKnnGraph, i: int) -> np.ndarray:
    """``(K, C)`` matrix whose row ``k`` is ``nodes[graph.neighbors[i, k]]``."""
    nodes = np.asarray(nodes)
    _check_graph(nodes, graph)
    return nodes[graph.neighbors[i]]


def gather_all(nodes, graph: DilatedKnnGraph) -> np.ndarray:
    """All neighborhoods at once, shape ``(N, K, C)``."""
    nodes = np.asarray(nodes)
    _check_graph(nodes, graph)
    return nodes[graph.neighbors]
