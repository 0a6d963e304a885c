import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from reifenberg.errors import ColorBudgetExceeded
from reifenberg.geometry import PointCloud
from reifenberg.net import color_net, greedy_separated, maximal_net, neighbor_csr


def cloud(seed, m, n=2):
    pts = np.random.default_rng(seed).uniform(-1, 1, size=(m, n))
    return PointCloud(pts, 1, 0.5, 0.0)


@given(st.integers(0, 10_000), st.integers(2, 300), st.floats(0.02, 0.5))
def test_net_is_separated_and_covering(seed, m, a):
    E = cloud(seed, m)
    X = maximal_net(E, a)
    if X.size > 1:
        assert pdist(E.points[X]).min() >= a
    dist, _ = cKDTree(E.points[X]).query(E.points)
    assert dist.max() < a


@given(st.integers(0, 10_000), st.integers(2, 200))
def test_net_is_greedy_in_index_order(seed, m):
    E = cloud(seed, m)
    a = 0.2
    kept = []
    for i, p in enumerate(E.points):
        if all(np.linalg.norm(p - E.points[j]) >= a for j in kept):
            kept.append(i)
    np.testing.assert_array_equal(maximal_net(E, a), kept)


def test_neighbor_csr_strict_radius():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    indptr, indices = neighbor_csr(pts, 1.0)
    nbrs = [sorted(indices[indptr[i]:indptr[i + 1]].tolist()) for i in range(3)]
    assert nbrs == [[2], [2], [0, 1]]


def test_net_of_line_is_regular(line2d):
    X = maximal_net(line2d, 0.0099)
    # lattice spacing 2e-3: every fifth sample is kept
    np.testing.assert_array_equal(X, np.arange(0, 2001, 5))


def test_collinear_coloring_example():
    # points 8a apart: neighbours conflict, the ends are exactly 16a apart
    a = 0.01
    E = PointCloud(np.array([[0.0, 0.0], [8 * a, 0.0], [16 * a, 0.0]]), 1, 0.5, 0.0)
    net = color_net(E, np.arange(3), a)
    assert net.colors.tolist() == [1, 2, 1]
    assert net.N == 2
    assert net.members(1).tolist() == [0, 2]


@given(st.integers(0, 10_000), st.integers(5, 300))
def test_coloring_classes_are_16a_separated(seed, m):
    E = cloud(seed, m)
    a = 0.02
    X = maximal_net(E, a)
    net = color_net(E, X, a)
    assert set(net.colors.tolist()) == set(range(1, net.N + 1))
    for j in range(1, net.N + 1):
        c = net.coords[net.members(j)]
        if c.shape[0] > 1:
            assert pdist(c).min() >= 16 * a


def test_coloring_budget():
    pts = np.random.default_rng(0).uniform(0, 1e-3, size=(1200, 2))
    E = PointCloud(pts, 1, 0.5, 0.0)
    with pytest.raises(ColorBudgetExceeded):
        color_net(E, np.arange(1200), 1.0)


def test_net_requires_positive_spacing(circle):
    with pytest.raises(ValueError):
        maximal_net(circle, 0.0)
    assert greedy_separated(np.zeros((0, 2)), 0.1).size == 0
