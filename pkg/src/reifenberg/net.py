"""Maximal a-separated nets and their coloring into 16a-separated classes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels as K
from .errors import ColorBudgetExceeded
from .geometry import PointCloud

SEPARATION_FACTOR = 16


def neighbor_csr(points, radius):
    """CSR adjacency of pairs at distance strictly below ``radius``."""
    m = points.shape[0]
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    if pairs.size:
        dist = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
        pairs = pairs[dist < radius]
    both = np.vstack([pairs, pairs[:, ::-1]]) if pairs.size else np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    counts = np.bincount(both[:, 0], minlength=m) if both.size else np.zeros(m, dtype=np.int64)
    indptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, np.ascontiguousarray(both[:, 1], dtype=np.int64)


def greedy_separated(points, spacing):
    """Indices kept by one greedy pass in index order: a point is kept when
    no earlier kept point lies closer than ``spacing``."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    indptr, indices = neighbor_csr(points, spacing)
    return np.flatnonzero(K.greedy_select(indptr, indices, points.shape[0]))


def maximal_net(E: PointCloud, a) -> np.ndarray:
    """Maximal a-separated subset of the samples (indices, ascending)."""
    if not a > 0:
        raise ValueError("a must be positive")
    return greedy_separated(E.points, a)


@dataclass
class ColoredNet:
    points: np.ndarray  # indices into the point cloud
    colors: np.ndarray  # 1..N per net point
    a: float
    N: int
    coords: np.ndarray

    def members(self, j):
        """Positions (into ``points``) of the net points with color j."""
        return np.flatnonzero(self.colors == j)

    def to_json(self):
        return {"points": self.points.tolist(), "colors": self.colors.tolist(), "a": self.a, "N": self.N}


def color_net(E: PointCloud, X, a) -> ColoredNet:
    """Partition the net into classes whose points are >= 16a apart.

    Class j is a maximal 16a-separated subset (greedy in index order) of the
    points left after classes 1..j-1.
    """
    X = np.asarray(X, dtype=np.int64)
    coords = E.points[X]
    n = E.n
    budget = 34 ** n
    indptr, indices = neighbor_csr(coords, SEPARATION_FACTOR * a)
    colors, N = K.greedy_coloring(indptr, indices, X.size, budget)
    if N > budget or (colors == 0).any():
        raise ColorBudgetExceeded(f"coloring needs more than 34^{n} = {budget} classes", N=int(N))
    return ColoredNet(X, np.asarray(colors, dtype=np.int64), float(a), int(N), coords)
