import types

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import directed_hausdorff as scipy_directed

from reifenberg.errors import EmptyBall, EmptySet, GridTooCoarse
from reifenberg.geometry import AffinePlane, PointCloud, local_hausdorff_set_plane
from reifenberg.oracle import (
    central_stencil,
    directed_hausdorff,
    directional_fd,
    finite_diff_bounds,
    gamma_sweep_2d,
    hausdorff_bilateral,
    lipschitz_pairs,
)

# DERIVED: unit circle with 4096 equally spaced samples, x = (1, 0), r = 0.2.
# The sweep at 2e4 angles and the Nelder-Mead fast path agree to 1e-16.
CIRCLE_SWEEP_R02 = 0.1981394823285406
# DERIVED: tangent line at (1, 0), r = 0.1, same cloud; confirmed by a
# separate brute-force evaluation of both one-sided sups.
CIRCLE_TANGENT_R01 = 0.09954524667016094

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def point_sets(n):
    return arrays(np.float64, st.tuples(st.integers(1, 25), st.just(n)), elements=coords)


@given(point_sets(3), point_sets(3))
def test_directed_hausdorff_matches_scipy(A, B):
    val, i, j = directed_hausdorff(A, B)
    assert val == pytest.approx(scipy_directed(A, B)[0], abs=1e-12)
    assert np.linalg.norm(A[i] - B[j]) == pytest.approx(val, abs=1e-12)


@given(point_sets(2), point_sets(2))
def test_bilateral_is_symmetric_and_max_of_sides(A, B):
    ab = hausdorff_bilateral(A, B)
    ba = hausdorff_bilateral(B, A)
    assert ab.value == pytest.approx(ba.value, abs=1e-12)
    assert ab.value == max(ab.extra["a_to_b"], ab.extra["b_to_a"])


def test_hausdorff_of_identical_sets_is_zero():
    A = np.random.default_rng(1).normal(size=(40, 3))
    assert hausdorff_bilateral(A, A[::-1]).value == 0.0


def test_hausdorff_rejects_empty():
    with pytest.raises(EmptySet):
        directed_hausdorff(np.zeros((0, 2)), np.zeros((3, 2)))


def test_sweep_frozen_value_on_circle(circle):
    rep = gamma_sweep_2d(circle, circle.points[0], 0.2)
    assert rep.value == pytest.approx(CIRCLE_SWEEP_R02, abs=1e-12)
    # the reported angle reproduces the value
    d = rep.witness[1]
    line = AffinePlane(circle.points[0], d[None, :])
    assert local_hausdorff_set_plane(circle, line, circle.points[0], 0.2) == pytest.approx(rep.value, abs=1e-15)


def test_tangent_line_frozen_value(circle):
    x = np.array([1.0, 0.0])
    P = AffinePlane(x, [[0.0, 1.0]])
    assert local_hausdorff_set_plane(circle, P, x, 0.1) == pytest.approx(CIRCLE_TANGENT_R01, abs=1e-15)


def test_sweep_beats_tangent_line(circle):
    # the optimal line through x is never worse than the tangent
    x = np.array([1.0, 0.0])
    assert gamma_sweep_2d(circle, x, 0.1).value <= CIRCLE_TANGENT_R01 + 1e-15


def test_sweep_on_a_sampled_line(line2d):
    # the best line is the axis; its grid points between samples sit one gap away
    rep = gamma_sweep_2d(line2d, line2d.points[1000], 0.3)
    assert rep.value == pytest.approx(line2d.sample_gap / 0.3, rel=1e-9)
    assert abs(rep.witness[1][1]) < 1e-9


def test_sweep_rotation_invariant(circle):
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    E2 = PointCloud(circle.points @ R.T, 1, circle.r0, circle.sample_gap)
    a = gamma_sweep_2d(circle, circle.points[17], 0.15).value
    b = gamma_sweep_2d(E2, E2.points[17], 0.15).value
    assert a == pytest.approx(b, abs=1e-9)


def test_sweep_errors(circle):
    with pytest.raises(EmptyBall):
        gamma_sweep_2d(circle, np.array([5.0, 5.0]), 0.1)
    E3 = PointCloud(np.c_[circle.points, np.zeros(len(circle))], 1, 0.5, circle.sample_gap)
    with pytest.raises(ValueError):
        gamma_sweep_2d(E3, E3.points[0], 0.1)


@given(st.floats(-5, 5), st.floats(-3, 3), st.integers(3, 30))
def test_lipschitz_pairs_linear(slope, offset, k):
    t = np.linspace(-1, 1, k)[:, None]
    f = slope * t + offset
    rep = lipschitz_pairs(t, f)
    assert rep.value == pytest.approx(abs(slope), rel=1e-9, abs=1e-12)


def test_lipschitz_pairs_ignores_coincident_tangents():
    t = np.array([[0.0], [0.0], [1.0]])
    f = np.array([[0.0], [5.0], [0.5]])
    rep = lipschitz_pairs(t, f)
    assert rep.value == pytest.approx(4.5)
    assert rep.witness == [1, 2]


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_central_stencil_exact_on_polynomials(k):
    offs, coef = central_stencil(k)
    rng = np.random.default_rng(k)
    deg = 2 * int(offs.max())
    c = rng.normal(size=deg + 1)
    vals = np.polyval(c[::-1], offs.astype(float))
    exact = np.polyval(np.polyder(np.poly1d(c[::-1]), k), 0.0)
    assert coef @ vals == pytest.approx(exact, rel=1e-9, abs=1e-9)


@given(st.floats(0.5, 3.0), st.integers(1, 3))
@settings(max_examples=20)
def test_directional_fd_on_sine(freq, k):
    pitch = 1e-3
    u = np.arange(-200, 201) * pitch
    vals = np.sin(freq * u)[:, None]
    est = directional_fd(vals, pitch, k)
    m = int(central_stencil(k)[0].max())
    exact = freq ** k * np.abs(np.sin(freq * u[m:-m] + k * np.pi / 2)).max()
    assert est == pytest.approx(exact, rel=1e-3)


def test_finite_diff_bounds_richardson_stable_for_smooth_data():
    pitch = 0.01
    u = np.arange(-60, 61) * pitch
    g = np.meshgrid(u, u, indexing="ij")
    vals = (np.sin(g[0]) * np.cos(2 * g[1]))[..., None]
    patch = types.SimpleNamespace(values=vals, pitch=pitch)
    for k in (1, 2, 3):
        rep = finite_diff_bounds(patch, k)
        assert rep.extra["stable"]
        assert rep.extra["richardson_gap"] < 0.01


def test_finite_diff_bounds_grid_too_small():
    patch = types.SimpleNamespace(values=np.zeros((5, 1)), pitch=0.1)
    with pytest.raises(GridTooCoarse):
        finite_diff_bounds(patch, 3)
