import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from reifenberg.codim1 import (
    DomainConfig,
    GridSpec,
    bounding_grid,
    certify_two_components,
    chain_connected,
    domain_ladder,
    inner_domains,
    label_components,
    ladder_scales,
    mark_near,
    multiscale_nesting,
    offset_graph,
    orient,
    scale_surface,
)
from reifenberg.errors import (
    ComponentCountMismatch,
    ContractionFailure,
    InputError,
    NotChainConnected,
    ResolutionTooCoarse,
    ResourceLimitExceeded,
    UnsupportedCodimension,
)
from reifenberg.geometry import AffinePlane, PointCloud
from reifenberg.surface import GraphPatch
from reifenberg.synth import GeneratorSpec, generate


@pytest.fixture(scope="module")
def ring():
    return generate(GeneratorSpec("circle", m=4096, r0=0.3))


@pytest.fixture(scope="module")
def surfaces(ring):
    return [scale_surface(ring, r) for r in (0.3, 0.1)]


@pytest.fixture(scope="module")
def ladder(ring, surfaces):
    return domain_ladder(ring, [0.3, 0.1], surfaces=surfaces)


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_grid_locate_inverts_centers(seed, n):
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in rng.integers(1, 30, size=n))
    g = GridSpec(rng.normal(size=n), float(rng.uniform(0.01, 1)), shape)
    flat = rng.integers(0, g.size, size=50)
    np.testing.assert_array_equal(g.locate(g.centers(flat)), flat)
    assert g.locate(g.lo - 1.0)[0] == -1


def test_refined_grid_nests():
    g = GridSpec(np.zeros(2), 0.3, (4, 5))
    f = g.refined(3)
    assert f.shape == (12, 15) and f.h == pytest.approx(0.1)
    # every fine center lies in the coarse cell with the floor-divided index
    idx = np.stack(np.unravel_index(np.arange(f.size), f.shape), 1)
    coarse = np.ravel_multi_index((idx // 3).T, g.shape)
    np.testing.assert_array_equal(g.locate(f.centers()), coarse)


@given(st.integers(0, 10_000), st.floats(0.01, 0.3))
@settings(max_examples=30)
def test_mark_near_matches_brute_force(seed, radius):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(20, 2))
    g = GridSpec(np.array([-1.2, -1.2]), 0.04, (60, 60))
    mask = mark_near(g, pts, radius)
    dist, _ = cKDTree(pts).query(g.centers())
    np.testing.assert_array_equal(mask, dist <= radius)


def test_annulus_has_two_components():
    t = np.linspace(0, 2 * np.pi, 2000, endpoint=False)
    pts = np.c_[np.cos(t), np.sin(t)]
    g = GridSpec(np.array([-1.5, -1.5]), 0.01, (300, 300))
    L = label_components(pts, g, 0.02)
    assert L.count == 2
    assert L.volumes.sum() == np.count_nonzero(L.labels >= 0)
    inside, outside = L.label_at(np.array([[0.0, 0.0], [1.4, 1.4]]))
    assert inside != outside and min(inside, outside) >= 0
    # inside volume is close to the disk of radius 1 - dilation
    vol_in = L.volumes[inside] * g.h ** 2
    assert vol_in == pytest.approx(np.pi * 0.98 ** 2, rel=0.02)
    with pytest.raises(ResolutionTooCoarse):
        label_components(pts, g, resolve=0.001)
    with pytest.raises(ResourceLimitExceeded):
        label_components(pts, g, max_cells=100)


def test_chain_connected():
    t = np.linspace(0, 1, 101)
    E = PointCloud(np.c_[t, 0 * t], 1, 0.2, 0.005)
    assert chain_connected(E, 0.0101)
    assert not chain_connected(E, 0.0099)
    E2 = PointCloud(np.r_[np.c_[t, 0 * t], np.c_[t + 2, 0 * t]], 1, 0.2, 0.005)
    assert not chain_connected(E2, 0.5)
    with pytest.raises(InputError):
        chain_connected(E, 0.0)


def test_ladder_scales():
    np.testing.assert_allclose(ladder_scales(0.3, 0.3 / 27), [0.3, 0.1, 0.1 / 3, 0.1 / 9])
    assert ladder_scales(0.3, 0.31) == []


def test_offset_of_flat_patch_is_shifted():
    P = AffinePlane(np.zeros(2), [[1.0, 0.0]])
    vals = np.zeros((129, 1))
    patch = GraphPatch(P, 0.64, 0.01, 64, 0.0, None, vals)
    G = offset_graph(patch, 0.05, 1)
    fin = np.isfinite(G.values)
    np.testing.assert_allclose(G.values[fin], 0.05, atol=1e-14)
    steep = GraphPatch(P, 0.64, 0.01, 64, 0.0, None, np.arange(-64, 65)[:, None] * 0.01)
    with pytest.raises(ContractionFailure):
        offset_graph(steep, 0.05, 1)


def test_offset_of_circle_arc_is_concentric():
    # lower unit-circle arc near the origin as a graph; its offsets are circles of radius 1 -+ delta
    P = AffinePlane(np.zeros(2), [[1.0, 0.0]])
    u = np.arange(-40, 41) * 0.002
    vals = (1 - np.sqrt(1 - u ** 2))[:, None]
    patch = GraphPatch(P, 0.08, 0.002, 40, 0.1, None, vals, 5)
    G = offset_graph(patch, 0.01, 1, max_slope=0.2)
    fin = np.isfinite(G.values[:, 0])
    rad = np.linalg.norm(np.c_[u[fin], G.values[fin, 0]] - [0.0, 1.0], axis=1)
    np.testing.assert_allclose(rad, 0.99, atol=2e-5)
    # spline end effects only reach a few nodes in from the rim
    np.testing.assert_allclose(rad[np.abs(u[fin]) < 0.04], 0.99, atol=1e-8)


def test_orientation_is_consistent(surfaces):
    oa = orient(surfaces[0].smoothed)
    S = surfaces[0].smoothed.point_sample
    radial = S / np.linalg.norm(S, axis=1, keepdims=True)
    dots = (oa.normals * radial).sum(1)
    # all normals point the same way across the circle
    assert np.all(np.abs(dots) > 0.99)
    assert np.all(np.sign(dots) == np.sign(dots[0]))
    assert oa.report["overlap_ok"] and oa.report["neighbour_ok"]


def test_inner_domains_zones_and_bands(ring, ladder):
    for dom in ladder["domains"]:
        rep = dom.report
        assert rep["ok"]
        assert rep["U_count"] == 2
        assert rep["zone_far_cells_outside_W"] == 0 and rep["zone_near_cells_in_W"] == 0
        assert rep["offsets"]["violations"] == 0
        # one domain holds the center of the circle, the other the far corner
        g = dom.W1.grid
        c, corner = g.locate(np.array([[0.0, 0.0], g.lo + 0.5 * g.h]))
        holders = {j for j, W in ((1, dom.W1), (2, dom.W2)) if W.mask[c]}
        outers = {j for j, W in ((1, dom.W1), (2, dom.W2)) if W.mask[corner]}
        assert len(holders) == 1 and len(outers) == 1 and holders != outers


def test_inner_domain_boundary_band_brute_force(ring, ladder):
    dom = ladder["domains"][0]
    unit = dom.report["unit"]
    g = dom.W1.grid
    m = dom.W1.mask.reshape(g.shape)
    edge = m.copy()
    edge[1:-1, 1:-1] &= ~(m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:])
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = False
    d, _ = ring.tree.query(g.centers(np.flatnonzero(edge.ravel())))
    slack = g.h * np.sqrt(2)
    assert d.min() >= 3 * unit - slack and d.max() <= 6 * unit + slack


def test_nesting_and_identity_pairing(ring, ladder):
    p, rep = multiscale_nesting(ring, 0.3, 0.1, *ladder["domains"], cfg=DomainConfig())
    assert p == "identity"
    assert rep["plane_distance_over_eps"] < 1e-6
    with pytest.raises(InputError):
        multiscale_nesting(ring, 0.3, 0.2, *ladder["domains"])


def test_certify_two_components(ring, surfaces):
    rep = certify_two_components(ring, 0.1, surfaces=surfaces)
    assert rep["ok"] and rep["halving_stable"]
    assert rep["E_components"] == {1: 2, 2: 2}
    assert rep["runs"]["1"]["pairings"] == ["identity"]


def test_open_arcs_are_rejected():
    E = generate(GeneratorSpec("two_arcs", m=4096, r0=0.3))
    with pytest.raises(ComponentCountMismatch) as err:
        certify_two_components(E, 0.1)
    assert err.value.details["count"] == 1
    with pytest.raises(NotChainConnected):
        inner_domains(E, 0.3)


def test_codimension_two_is_unsupported(ring):
    E3 = PointCloud(np.c_[ring.points, np.zeros(len(ring))], 1, 0.3, ring.sample_gap)
    with pytest.raises(UnsupportedCodimension):
        inner_domains(E3, 0.3)


def test_bounding_grid_margin(ring):
    g = bounding_grid(ring, 0.05)
    assert np.allclose(g.lo, -1.3)
    assert np.all(g.lo + np.asarray(g.shape) * g.h >= 1.3 - 1e-12)
