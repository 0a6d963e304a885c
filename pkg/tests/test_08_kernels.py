"""The compiled kernels against the numpy fallback, plus brute-force checks."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from reifenberg import _kernels
from reifenberg._kernels import _fallback as F
from reifenberg.net import neighbor_csr

core = pytest.importorskip("reifenberg._kernels._core")

seeds = st.integers(0, 2**32 - 1)


def graph(seed, m, radius):
    pts = np.random.default_rng(seed).uniform(size=(m, 2))
    return neighbor_csr(pts, radius)


def test_env_var_forces_fallback():
    code = "from reifenberg import _kernels as K; print(K.BACKEND)"
    env = dict(os.environ, REIFENBERG_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    env.pop("REIFENBERG_KERNELS")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == _kernels.BACKEND


@given(seeds, st.integers(1, 200), st.floats(0.01, 0.5))
def test_greedy_select(seed, m, radius):
    indptr, indices = graph(seed, m, radius)
    np.testing.assert_array_equal(np.asarray(core.greedy_select(indptr, indices, m)).astype(bool),
                                  F.greedy_select(indptr, indices, m))


@given(seeds, st.integers(1, 200), st.floats(0.01, 0.5), st.integers(1, 40))
def test_greedy_coloring(seed, m, radius, budget):
    indptr, indices = graph(seed, m, radius)
    ca, na = core.greedy_coloring(indptr, indices, m, budget)
    cb, nb = F.greedy_coloring(indptr, indices, m, budget)
    assert na == nb
    np.testing.assert_array_equal(np.asarray(ca), cb)
    if nb <= budget:
        # proper coloring
        for i in range(m):
            nbr = indices[indptr[i]:indptr[i + 1]]
            assert np.all(cb[nbr] != cb[i])


@given(seeds, st.integers(1, 40), st.integers(1, 60), st.integers(1, 3), st.integers(1, 2), st.floats(0.1, 5))
def test_mcshane(seed, k, q, d, c, L):
    rng = np.random.default_rng(seed)
    sites = rng.uniform(-1, 1, size=(k, d))
    values = rng.normal(size=(k, c))
    queries = rng.uniform(-1.5, 1.5, size=(q, d))
    a = np.asarray(core.mcshane(sites, values, L, queries))
    b = F.mcshane(sites, values, L, queries)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_mcshane_reproduces_lipschitz_data():
    sites = np.linspace(-1, 1, 9)[:, None]
    values = np.abs(sites)
    np.testing.assert_allclose(core.mcshane(sites, values, 1.0, sites), values, atol=1e-15)


@given(seeds, st.integers(2, 40), st.integers(1, 2), st.integers(1, 2), st.floats(0, 1))
def test_pair_ratio_max(seed, k, d, c, frac_new):
    rng = np.random.default_rng(seed)
    tang = rng.uniform(size=(k, d))
    tang[rng.integers(k)] = tang[0]  # a coincident tangential pair
    norm = rng.normal(size=(k, c))
    new = (rng.uniform(size=k) < frac_new).astype(np.uint8)
    a = core.pair_ratio_max(tang, norm, new, 1e-12, 1e-12)
    b = F.pair_ratio_max(tang, norm, new, 1e-12, 1e-12)
    assert a[0] == pytest.approx(b[0], rel=1e-12, abs=0)
    assert tuple(a[1:]) == tuple(b[1:])


@given(seeds, st.integers(1, 4), st.floats(0, 1))
@settings(max_examples=60)
def test_flood_label(seed, nd, density):
    rng = np.random.default_rng(seed)
    shape = rng.integers(1, 25 if nd < 3 else 10, size=nd).astype(np.int64)
    free = (rng.uniform(size=int(np.prod(shape))) < density).astype(np.uint8)
    la, na, va, ra = core.flood_label(free, shape)
    lb, nb, vb, rb = F.flood_label(free, shape)
    assert na == nb
    np.testing.assert_array_equal(np.asarray(la), lb)
    np.testing.assert_array_equal(va, vb)
    np.testing.assert_array_equal(ra, rb)
    # independent reference: same partition as scipy's face-connected labeling
    ref, nref = ndimage.label(free.reshape(shape).astype(bool))
    assert nref == na
    np.testing.assert_array_equal(np.asarray(la).reshape(shape) >= 0, ref > 0)
    for k in range(na):
        assert np.asarray(la)[ra[k]] == k
        assert np.unique(ref.ravel()[np.asarray(la) == k]).size == 1


def test_flood_label_large_frontier():
    # a full grid makes the breadth-first frontier grow past the initial buffer
    shape = np.array([300, 300], dtype=np.int64)
    lab, n, vol, rep = core.flood_label(np.ones(300 * 300, dtype=np.uint8), shape)
    assert n == 1 and vol.tolist() == [90000] and rep.tolist() == [0]
    assert np.all(np.asarray(lab) == 0)


@given(seeds, st.integers(1, 60), st.integers(1, 60), st.integers(1, 4))
def test_nearest_dist_brute(seed, na, nb, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(na, n))
    B = rng.normal(size=(nb, n))
    da, ia = core.nearest_dist_brute(A, B)
    db, ib = F.nearest_dist_brute(A, B)
    np.testing.assert_allclose(da, db, rtol=1e-12, atol=1e-14)
    ref = np.sqrt(((A[:, None] - B[None]) ** 2).sum(-1)).min(1)
    np.testing.assert_allclose(da, ref, rtol=1e-12, atol=1e-14)


@given(seeds, st.integers(2, 80), st.integers(1, 6))
@settings(max_examples=40)
def test_ball_ratio_local(seed, m, nb):
    rng = np.random.default_rng(seed)
    n, d = 3, 2
    pts = rng.uniform(-1, 1, size=(m, n))
    new = (rng.uniform(size=m) < 0.5).astype(np.uint8)
    centers = rng.uniform(-1, 1, size=(nb, n))
    frames = np.empty((nb, d, n))
    nframes = np.empty((nb, n - d, n))
    for b in range(nb):
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        frames[b] = q[:, :d].T
        nframes[b] = q[:, d:].T
    a = core.ball_ratio_local(pts, new, centers, frames, nframes, 0.8, 1e-12, 1e-12)
    b = F.ball_ratio_local(pts, new, centers, frames, nframes, 0.8, 1e-12, 1e-12)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12, atol=0)
    np.testing.assert_array_equal(np.asarray(a[1]), b[1])
    np.testing.assert_array_equal(np.asarray(a[2]), b[2])
