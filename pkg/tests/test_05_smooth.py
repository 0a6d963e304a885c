import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reifenberg.errors import GridTooCoarse, PatchMismatch, ResourceLimitExceeded
from reifenberg.geometry import AffinePlane
from reifenberg.smooth import (
    SmoothingConfig,
    blend_patch,
    bump_weights,
    derivative_grid,
    evaluate_smoothed,
    mollify_grid,
    mollify_patch,
    smooth_surface,
    smoothstep,
)
from reifenberg.surface import Deadline, GraphPatch, build_surface
from reifenberg.synth import GeneratorSpec, generate


@pytest.fixture(scope="module")
def stage_atlas():
    return build_surface(generate(GeneratorSpec("circle", m=1024, r0=0.5)), 1.0)


@pytest.fixture(scope="module")
def smoothed(stage_atlas):
    return smooth_surface(stage_atlas)


def flat_patch(values, pitch=0.01, base=None):
    half = (values.shape[0] - 1) // 2
    P = AffinePlane(np.zeros(2) if base is None else base, [[1.0, 0.0]])
    return GraphPatch(P, half * pitch, pitch, half, 1.0, None, values)


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("order", [4, 5, 7])
def test_bump_is_a_symmetric_probability(d, order):
    w = bump_weights(d, 0.1, 0.01, order)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w, w[::-1], atol=0)
    # compact support inside the open ball of radius width
    assert w.flat[0] == 0.0


@given(st.floats(0, 3))
def test_smoothstep_range_and_ends(r):
    v = float(smoothstep(np.array([r]), 1.3, 1.5)[0])
    assert 0.0 <= v <= 1.0
    if r <= 1.3:
        assert v == 1.0
    if r >= 1.5:
        assert v == 0.0


def test_smoothstep_monotone():
    r = np.linspace(1.2, 1.6, 401)
    assert np.all(np.diff(smoothstep(r, 1.3, 1.5)) <= 0)


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=20)
def test_mollifier_reproduces_affine_maps(slope, offset):
    u = np.arange(-50, 51) * 0.01
    vals = (slope * u + offset)[:, None]
    out = mollify_grid(vals, 0.01, 0.1)
    # away from the border, where the nearest-value padding is not seen
    np.testing.assert_allclose(out[10:-10], vals[10:-10], atol=1e-12)


def test_mollify_patch_requires_fine_grid():
    p = flat_patch(np.zeros((21, 1)), pitch=0.05)
    with pytest.raises(GridTooCoarse):
        mollify_patch(p, width=0.1)


def test_blend_keeps_old_outside_and_new_inside():
    u = np.arange(-200, 201) * 0.01
    old = flat_patch(np.sin(u)[:, None])
    new = flat_patch(np.cos(u)[:, None])
    H = blend_patch(old, new, a=1.0)
    inside = np.abs(u) <= 1.3
    outside = np.abs(u) >= 1.5
    np.testing.assert_array_equal(H.values[inside], new.values[inside])
    np.testing.assert_array_equal(H.values[outside], old.values[outside])
    other = flat_patch(np.zeros((401, 1)), base=np.array([0.0, 1.0]))
    with pytest.raises(PatchMismatch):
        blend_patch(old, other)


def test_config_validation():
    with pytest.raises(ValueError):
        SmoothingConfig(kernel_width=2.0).validate()
    with pytest.raises(ValueError):
        SmoothingConfig(blend_outer=1.6, blend_inner=1.3).validate()
    with pytest.raises(ValueError):
        SmoothingConfig(k_max=4, kernel_order=5).validate()
    with pytest.raises(ValueError):
        SmoothingConfig(grid_factor=4).validate()


def test_smoothed_certificates(smoothed, stage_atlas):
    cert = smoothed.certificates
    assert smoothed.stage == "smoothed"
    assert cert["smoothed_C0"] <= 100
    assert cert["smoothed_C0_within_2C0"]
    for k in (1, 2, 3):
        assert np.isfinite(cert["Lambda"][k])
        assert cert["richardson_gap"][k] <= 0.1
    # the fixed point converges in a couple of sweeps
    assert cert["fixed_point_iterations"] <= 5


def test_smoothed_points_stay_on_the_circle(smoothed):
    r = np.linalg.norm(smoothed.point_sample, axis=1)
    sup = smoothed.certificates["smoothed_sup_S_to_E"]
    assert np.abs(r - 1).max() <= sup + smoothed.E.sample_gap


def test_second_derivative_matches_curvature(smoothed):
    # over the plane of a net point the unit circle is 1 - sqrt(1 - t^2)
    a = smoothed.a
    g = derivative_grid(smoothed, 0, a, a / 64)
    u = g.nodes()[:, 0]
    F = g.flat_values()[:, 0]
    ok = np.isfinite(F)
    coef = np.polyfit(u[ok], F[ok], 2)
    assert abs(abs(2 * coef[0]) - 1.0) < 0.05


def test_evaluate_smoothed_is_consistent(smoothed):
    P = smoothed.planes[3]
    y = evaluate_smoothed(smoothed, 3, np.zeros((1, 1)))[0]
    assert np.linalg.norm(P.tangential(y)) < 1e-12
    assert abs(np.linalg.norm(y) - 1) < 1e-3


def test_smoothing_deadline(stage_atlas):
    with pytest.raises(ResourceLimitExceeded):
        smooth_surface(stage_atlas, deadline=Deadline(0.0))
