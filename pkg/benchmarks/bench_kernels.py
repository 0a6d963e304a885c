"""Compiled kernels against the numpy fallback on representative sizes.

Usage::

    python benchmarks/bench_kernels.py [--repeat 3] [--json out.json]

Each row reports the best of ``repeat`` wall-clock runs for both backends
and checks that the outputs agree.
"""

import argparse
import json
import time

import numpy as np

from reifenberg._kernels import _fallback as F
from reifenberg.net import neighbor_csr

try:
    from reifenberg._kernels import _core as C
except ImportError:  # pragma: no cover - extension not built
    C = None


def best_of(fn, repeat):
    out, best = None, np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases(rng):
    pts = rng.uniform(size=(20_000, 2))
    indptr, indices = neighbor_csr(pts, 0.01)
    m = len(pts)
    yield "greedy_select m=20000", (lambda K: K.greedy_select(indptr, indices, m)), np.asarray
    yield ("greedy_coloring m=20000", (lambda K: K.greedy_coloring(indptr, indices, m, 64)),
           lambda o: np.asarray(o[0]))

    sites = rng.uniform(-1, 1, size=(400, 2))
    values = rng.normal(size=(400, 1))
    queries = rng.uniform(-1, 1, size=(20_000, 2))
    yield "mcshane 400 sites x 20000 nodes", (lambda K: K.mcshane(sites, values, 2.0, queries)), np.asarray

    tang = rng.uniform(size=(2000, 1))
    norm = rng.normal(size=(2000, 1)) * 1e-3
    new = (rng.uniform(size=2000) < 0.5).astype(np.uint8)
    yield ("pair_ratio_max k=2000", (lambda K: K.pair_ratio_max(tang, norm, new, 1e-12, 1e-12)),
           lambda o: np.asarray(o[0]))

    shape = np.array([1500, 1500], dtype=np.int64)
    yy, xx = np.mgrid[:1500, :1500]
    ring = np.abs(np.hypot(yy - 750, xx - 750) - 500) < 3
    free = (~ring).ravel().astype(np.uint8)
    yield ("flood_label 1500^2 annulus", (lambda K: K.flood_label(free, shape)),
           lambda o: np.asarray(o[0]))

    A = rng.normal(size=(2000, 3))
    B = rng.normal(size=(3000, 3))
    yield "nearest_dist_brute 2000 x 3000", (lambda K: K.nearest_dist_brute(A, B)), lambda o: np.asarray(o[0])

    P = rng.uniform(-1, 1, size=(5000, 3))
    isn = (rng.uniform(size=5000) < 0.5).astype(np.uint8)
    cen = rng.uniform(-1, 1, size=(40, 3))
    frames = np.zeros((40, 2, 3))
    frames[:, 0, 0] = frames[:, 1, 1] = 1.0
    nframes = np.zeros((40, 1, 3))
    nframes[:, 0, 2] = 1.0
    yield ("ball_ratio_local 5000 pts x 40 balls",
           (lambda K: K.ball_ratio_local(P, isn, cen, frames, nframes, 0.3, 1e-12, 1e-12)),
           lambda o: np.asarray(o[0]))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    if C is None:
        raise SystemExit("compiled kernels are not built; run pip install -e . --no-build-isolation")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':40s} {'cython s':>10s} {'numpy s':>10s} {'speedup':>8s}  agree")
    for name, call, key in cases(rng):
        tc, oc = best_of(lambda: call(C), args.repeat)
        tf, of = best_of(lambda: call(F), args.repeat)
        agree = bool(np.allclose(key(oc), key(of), rtol=1e-12, atol=1e-12))
        rows.append({"kernel": name, "cython": tc, "numpy": tf, "speedup": tf / tc, "agree": agree})
        print(f"{name:40s} {tc:10.4f} {tf:10.4f} {tf / tc:8.1f}  {agree}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return rows


if __name__ == "__main__":
    main()
