"""Planes, projections, normalized local Hausdorff distances and flatness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .errors import EmptyBall, InsufficientSampling, InvalidPointCloud, NonPositiveRadius

GRID_FRACTION = 200  # plane grids use pitch min(sample_gap, r / GRID_FRACTION)
SEARCH_FRACTION = 40  # coarser plane grids while tilting planes of dimension >= 2


class PointCloud:
    """Finite sample of a d-dimensional set in R^n.

    Parameters
    ----------
    points : (m, n) array
    d : int
        Intrinsic dimension, ``0 < d < n``.
    r0 : float
        Reference scale.
    sample_gap : float
        Covering radius of the sample: every point of the underlying set is
        within ``sample_gap`` of a sample.
    interior : (m,) bool array, optional
        Points whose ``r0`` ball stays inside the sampled window.  Only used
        for samples of sets with boundary (plane patches); ``None`` means all.
    """

    def __init__(self, points, d, r0, sample_gap, interior=None, meta=None):
        pts = np.ascontiguousarray(np.asarray(points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise InvalidPointCloud("points must be a non-empty (m, n) array")
        n = pts.shape[1]
        if not (0 < d < n):
            raise InvalidPointCloud(f"need 0 < d < n, got d={d}, n={n}")
        if not r0 > 0:
            raise InvalidPointCloud("r0 must be positive")
        if not sample_gap >= 0:
            raise InvalidPointCloud("sample_gap must be non-negative")
        if not np.all(np.isfinite(pts)):
            raise InvalidPointCloud("non-finite coordinates")
        self.points = pts
        self.n = n
        self.d = int(d)
        self.r0 = float(r0)
        self.sample_gap = float(sample_gap)
        self.interior = None if interior is None else np.asarray(interior, dtype=bool)
        self.meta = dict(meta or {})
        self._tree = None

    def __len__(self):
        return self.points.shape[0]

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def center_indices(self):
        if self.interior is None:
            return np.arange(len(self))
        return np.flatnonzero(self.interior)

    def require_resolution(self, r=None):
        r = self.r0 if r is None else r
        if self.sample_gap > r / 100.0:
            raise InsufficientSampling(
                f"sample_gap {self.sample_gap:.3g} exceeds r/100 = {r / 100:.3g}",
                sample_gap=self.sample_gap,
                r=r,
            )

    def scaled(self, lam):
        return PointCloud(
            lam * self.points, self.d, lam * self.r0, lam * self.sample_gap, self.interior, self.meta
        )

    def with_r0(self, r0):
        return PointCloud(self.points, self.d, r0, self.sample_gap, self.interior, self.meta)


def canonical_basis(proj, k):
    """Deterministic orthonormal basis of the range of a projector.

    Greedy Gram-Schmidt on the columns of ``proj``, always taking the column
    with the largest residual.  Depends only on the subspace, so scaled
    inputs give the same frame up to rounding.
    """
    n = proj.shape[0]
    basis = []
    cols = proj.copy()
    for _ in range(k):
        norms = np.linalg.norm(cols, axis=0)
        i = int(np.argmax(norms))
        v = cols[:, i] / norms[i]
        basis.append(v)
        cols = cols - np.outer(v, v @ cols)
    return np.array(basis).reshape(k, n)


@dataclass
class AffinePlane:
    """``base`` plus the span of the orthonormal rows of ``frame`` (d, n)."""

    base: np.ndarray
    frame: np.ndarray
    _normal: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float).copy()
        self.frame = np.atleast_2d(np.asarray(self.frame, dtype=float)).copy()
        gram = self.frame @ self.frame.T
        if not np.allclose(gram, np.eye(self.d), atol=1e-12 * max(1.0, np.abs(gram).max())):
            raise ValueError("frame is not orthonormal")

    @classmethod
    def from_span(cls, base, vectors):
        """Plane through ``base`` spanned by arbitrary vectors, canonical frame."""
        v = np.atleast_2d(np.asarray(vectors, dtype=float))
        q, _ = np.linalg.qr(v.T)
        proj = q @ q.T
        return cls(base, canonical_basis(proj, v.shape[0]))

    @property
    def n(self):
        return self.frame.shape[1]

    @property
    def d(self):
        return self.frame.shape[0]

    @property
    def normal_frame(self):
        """Canonical orthonormal basis (n-d, n) of the orthogonal complement."""
        if self._normal is None:
            comp = np.eye(self.n) - self.frame.T @ self.frame
            self._normal = canonical_basis(comp, self.n - self.d)
        return self._normal

    def projector(self):
        return self.frame.T @ self.frame

    def tangential(self, p):
        return (np.asarray(p, dtype=float) - self.base) @ self.frame.T

    def normal_coords(self, p):
        return (np.asarray(p, dtype=float) - self.base) @ self.normal_frame.T

    def embed(self, t, f=None):
        """Point with tangential coords ``t`` and normal coords ``f``."""
        out = self.base + np.asarray(t, dtype=float) @ self.frame
        if f is not None:
            out = out + np.asarray(f, dtype=float) @ self.normal_frame
        return out

    def dist(self, p):
        p = np.asarray(p, dtype=float)
        diff = p - self.base
        return np.linalg.norm(diff - (diff @ self.frame.T) @ self.frame, axis=-1)

    def through(self, x):
        return AffinePlane(x, self.frame)

    def to_json(self):
        return {"base": self.base.tolist(), "frame": self.frame.tolist()}


def project(plane: AffinePlane, p):
    """Split ``p`` into tangential coordinates and the normal vector.

    ``plane.base + tangential @ plane.frame + normal`` reconstructs ``p``.
    """
    p = np.asarray(p, dtype=float)
    diff = p - plane.base
    t = diff @ plane.frame.T
    return t, diff - t @ plane.frame


def _check_radius(r):
    if not r > 0:
        raise NonPositiveRadius(f"radius must be positive, got {r}")


def default_pitch(sample_gap, r):
    pitch = r / GRID_FRACTION
    if sample_gap > 0:
        pitch = min(pitch, sample_gap)
    return pitch


def disk_grid(d, radius, pitch):
    """Lattice points of the closed d-disk plus samples of its rim."""
    k = int(np.floor(radius / pitch))
    ax = np.arange(-k, k + 1) * pitch
    if d == 1:
        pts = ax[:, None]
        rim = np.array([[-radius], [radius]])
    else:
        mesh = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
        pts = mesh[(mesh ** 2).sum(1) <= radius ** 2]
        if d == 2:
            nrim = max(8, int(np.ceil(2 * np.pi * radius / pitch)))
            ang = np.arange(nrim) * (2 * np.pi / nrim)
            rim = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            g = np.random.default_rng(0).normal(size=(int(np.ceil((radius / pitch) ** (d - 1))) * 4, d))
            rim = radius * g / np.linalg.norm(g, axis=1, keepdims=True)
    return np.vstack([pts, rim]) if radius > 0 else np.zeros((1, d))


def plane_ball_grid(P: AffinePlane, x, r, pitch):
    """Grid discretization of P ∩ B(x, r) (empty if the plane misses the ball)."""
    x = np.asarray(x, dtype=float)
    tc = P.tangential(x)
    c = P.embed(tc)
    h2 = r * r - float(((x - c) ** 2).sum())
    if h2 < 0:
        return np.zeros((0, P.n))
    rad = np.sqrt(h2)
    return c + disk_grid(P.d, rad, pitch) @ P.frame


def _plane_to_set_sup(P, x, r, tree, pitch):
    grid = plane_ball_grid(P, x, r, pitch)
    if grid.shape[0] == 0:
        return 0.0, True
    dist, _ = tree.query(grid)
    return float(dist.max()), False


def local_hausdorff_set_plane(E: PointCloud, P: AffinePlane, x, r, pitch=None, details=False):
    """Normalized two-sided distance between E and P inside B(x, r).

    An empty sup counts as 0; with ``details=True`` a dict carrying both
    sups and the emptiness flags is returned as well.
    """
    _check_radius(r)
    if pitch is None:
        pitch = default_pitch(E.sample_gap, r)
    idx = E.tree.query_ball_point(x, r)
    if idx:
        s1 = float(P.dist(E.points[idx]).max())
    else:
        s1 = 0.0
    s2, empty2 = _plane_to_set_sup(P, x, r, E.tree, pitch)
    value = (s1 + s2) / r
    if details:
        return value, {"set_to_plane": s1 / r, "plane_to_set": s2 / r,
                       "empty_set_side": not idx, "empty_plane_side": empty2}
    return value


def plane_plane_distance(P: AffinePlane, Q: AffinePlane, x, r, pitch=None):
    """Symmetric normalized Hausdorff distance between P and Q inside B(x, r).

    Each plane is discretized by a grid; distances from grid points to the
    other plane are exact.
    """
    _check_radius(r)
    if pitch is None:
        pitch = r / GRID_FRACTION
    total = 0.0
    for A, B in ((P, Q), (Q, P)):
        grid = plane_ball_grid(A, x, r, pitch)
        if grid.shape[0]:
            total += float(B.dist(grid).max())
    return total / r


def pca_plane(E: PointCloud, x, r):
    """Plane through x spanned by the top-d eigenvectors of the second moment
    of E ∩ B(x, r) about x."""
    _check_radius(r)
    x = np.asarray(x, dtype=float)
    idx = E.tree.query_ball_point(x, r)
    if not idx:
        raise EmptyBall(f"no samples in B(x, {r})", x=x.tolist(), r=r)
    diff = E.points[idx] - x
    moment = diff.T @ diff / (r * r)
    w, v = np.linalg.eigh(moment)
    top = v[:, np.argsort(w)[::-1][: E.d]]
    return AffinePlane(x, canonical_basis(top @ top.T, E.d))


def _rotated(plane: AffinePlane, theta):
    """Tilt the frame by the d x (n-d) parameter matrix ``theta``."""
    t = theta.reshape(plane.d, plane.n - plane.d)
    vecs = plane.frame + t @ plane.normal_frame
    q, _ = np.linalg.qr(vecs.T)
    return AffinePlane(plane.base, canonical_basis(q @ q.T, plane.d))


def gamma(E: PointCloud, x, r, pitch=None, refine=True):
    """Upper bound for the bilateral flatness number at (x, r).

    PCA of E ∩ B(x, r) about x gives the starting plane; Nelder-Mead over
    small tilts of the frame refines it.  For d >= 2 the search runs on a
    plane grid of pitch at least r / SEARCH_FRACTION and only the final
    candidates are evaluated at ``pitch``.  The returned value is exactly
    ``local_hausdorff_set_plane`` at the returned plane, so it never
    undercuts the true infimum over planes through x.

    Returns
    -------
    value : float
    plane : AffinePlane
        Passes through x.
    """
    _check_radius(r)
    x = np.asarray(x, dtype=float)
    if pitch is None:
        pitch = default_pitch(E.sample_gap, r)
    start = pca_plane(E, x, r)
    best_val = local_hausdorff_set_plane(E, start, x, r, pitch)
    best = start
    if not refine or best_val == 0.0:
        return best_val, best
    k = start.d * (start.n - start.d)
    search_pitch = pitch if start.d == 1 else max(pitch, r / SEARCH_FRACTION)

    def objective(theta):
        return local_hausdorff_set_plane(E, _rotated(start, theta), x, r, search_pitch)

    for step in (0.5 * best_val + 1e-3, 0.05 * best_val + 1e-5):
        for sign in (1.0, -1.0):
            simplex = np.vstack([np.zeros(k), sign * step * np.eye(k)])
            if best is not start:
                base = _tilt_of(start, best)
                simplex = simplex + base
            res = minimize(
                objective,
                simplex[0],
                method="Nelder-Mead",
                options={"initial_simplex": simplex, "xatol": 1e-12, "fatol": 1e-13, "maxiter": 400 * k},
            )
            cand = _rotated(start, res.x)
            val = local_hausdorff_set_plane(E, cand, x, r, pitch)
            if val < best_val:
                best_val, best = val, cand
    return best_val, best


def _tilt_of(start: AffinePlane, plane: AffinePlane):
    """Tilt parameters of ``plane`` relative to ``start`` (inverse of _rotated)."""
    a = plane.frame @ start.frame.T
    b = plane.frame @ start.normal_frame.T
    return np.linalg.solve(a, b).ravel()


@dataclass
class FlatnessReport:
    entries: list
    epsilon_max: float
    empty_sup: int = 0

    def to_json(self):
        return {
            "entries": [
                {"x": np.asarray(e["x"]).tolist(), "r": e["r"], "gamma": e["gamma"], "plane": e["plane"].to_json()}
                for e in self.entries
            ],
            "epsilon_max": self.epsilon_max,
            "empty_sup_count": self.empty_sup,
        }


def flatness_scan(E: PointCloud, radii, centers=None, refine=True):
    """gamma at every center (default: all interior samples) and radius."""
    radii = [float(r) for r in radii]
    for r in radii:
        _check_radius(r)
    if any(b > a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be descending")
    if centers is None:
        centers = E.center_indices()
    entries = []
    empty = 0
    for i in centers:
        x = E.points[i]
        for r in radii:
            val, plane = gamma(E, x, r, refine=refine)
            if not E.tree.query_ball_point(x, r):
                empty += 1
            entries.append({"index": int(i), "x": x, "r": r, "gamma": val, "plane": plane})
    eps = max((e["gamma"] for e in entries), default=0.0)
    return FlatnessReport(entries, eps, empty)
