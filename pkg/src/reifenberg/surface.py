"""Stagewise gluing of local Lipschitz graphs into one approximating set.

Net points are processed color by color.  At the stage of a point w the
current sample inside B(w, 4a) is read as a graph over the plane P_w,
extended to the whole 4a-disk and the part of that graph inside B(w, 3a)
is added to the sample.  Same-color points are 16a apart, so the patches
of one stage never see each other.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import _kernels as K
from .errors import (
    DegeneratePair,
    FlatnessBudgetExceeded,
    ResourceLimitExceeded,
    SamplesNotLipschitz,
    StageInvariantViolated,
)
from .geometry import AffinePlane, PointCloud, canonical_basis, plane_ball_grid
from .net import ColoredNet, color_net, greedy_separated, maximal_net

TINY = 1e-12


class Deadline:
    """Wall-clock budget shared by the pipeline stages (``None``: unlimited)."""

    def __init__(self, seconds=None):
        self.seconds = seconds
        self.start = time.monotonic()

    @property
    def elapsed(self):
        return time.monotonic() - self.start

    def check(self, where):
        if self.seconds is not None and self.elapsed > self.seconds:
            raise ResourceLimitExceeded(
                f"time budget of {self.seconds:g} s exhausted during {where}",
                elapsed=self.elapsed,
                budget=self.seconds,
                where=where,
            )


@dataclass
class BuildConfig:
    """Knobs of the construction.  Lengths are relative (to r0 or a)."""

    epsilon_budget: float = 1e-2
    a_ratio: float = 1.0 / 32
    tol_factor: float = 3.0  # tol_graph = tol_factor * sample_gap
    spacing_factor: float = 0.5  # new samples are >= spacing_factor * tol_graph apart
    patch_factor: float = 4.0  # patch radius / a
    pitch_divisor: int = 64
    baseline_degree: int = 2
    slope_cap: float = 1.0
    flatness_pitch: float | None = None  # fraction of r0; None: min(gap, r0/200) for d=1, r0/50 otherwise
    max_work: float = 5e10  # rough McShane operation budget
    max_seconds: float | None = None  # wall-clock budget, None for unlimited

    def to_json(self):
        return asdict(self)


def _monomials(s, degree):
    """Columns 1, s_i, s_i s_j (i <= j) up to ``degree`` (<= 2)."""
    k, d = s.shape
    cols = [np.ones(k)]
    if degree >= 1:
        cols.extend(s[:, i] for i in range(d))
    if degree >= 2:
        cols.extend(s[:, i] * s[:, j] for i in range(d) for j in range(i, d))
    return np.stack(cols, axis=1)


@dataclass
class GraphFunction:
    """F(u) = polynomial baseline + McShane extension of the residual.

    Evaluation is exact: at the sites it returns the data values.
    """

    sites: np.ndarray  # (k, d)
    residual: np.ndarray  # (k, c)
    L: float  # Lipschitz constant used for the residual
    coef: np.ndarray  # (nterms, c)
    scale: float
    degree: int

    def baseline(self, u):
        return _monomials(np.asarray(u, dtype=float) / self.scale, self.degree) @ self.coef

    def __call__(self, u):
        u = np.ascontiguousarray(np.atleast_2d(np.asarray(u, dtype=float)))
        out = self.baseline(u)
        if self.sites.shape[0]:
            out = out + K.mcshane(self.sites, self.residual, self.L, u)
        return out


@dataclass
class GraphPatch:
    """Map F: P -> P^perp over a disk, sampled on a square grid.

    The grid has ``g = 2 half + 1`` nodes ``k * pitch`` per axis (tangential
    coordinates relative to ``plane.base``) and ``values`` has shape
    ``(g,) * d + (c,)``.  When ``function`` is set it is the exact map and
    the grid is filled on first access.
    """

    plane: AffinePlane
    radius: float
    pitch: float
    half: int
    lipschitz_bound: float
    function: GraphFunction | None = None
    grid: np.ndarray | None = None
    interp_order: int = 1
    meta: dict = field(default_factory=dict)
    _coeffs: list | None = field(default=None, repr=False)

    @property
    def values(self):
        if self.grid is None:
            g = 2 * self.half + 1
            self.grid = self.function(self.nodes()).reshape((g,) * self.d + (self.c,))
        return self.grid

    @property
    def d(self):
        return self.plane.d

    @property
    def c(self):
        return self.plane.n - self.plane.d

    @property
    def axis(self):
        return np.arange(-self.half, self.half + 1) * self.pitch

    @property
    def center(self):
        return self.plane.base

    def nodes(self):
        ax = self.axis
        return np.stack(np.meshgrid(*([ax] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)

    def flat_values(self):
        return self.values.reshape(-1, self.c)

    def disk_mask(self, radius=None):
        radius = self.radius if radius is None else radius
        return (self.nodes() ** 2).sum(1) <= radius * radius * (1 + 1e-12)

    def evaluate(self, u, exact=True):
        """F at tangential coordinates ``u`` (k, d)."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if exact and self.function is not None:
            return self.function(u)
        return self.interpolate(u)

    def interpolate(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        coords = (u / self.pitch + self.half).T
        if self.interp_order > 1 and self._coeffs is None:
            self._coeffs = [
                ndimage.spline_filter(self.values[..., i], order=self.interp_order, mode="mirror")
                for i in range(self.c)
            ]
        out = np.empty((u.shape[0], self.c))
        for i in range(self.c):
            if self.interp_order > 1:
                out[:, i] = ndimage.map_coordinates(
                    self._coeffs[i], coords, order=self.interp_order, mode="mirror", prefilter=False
                )
            else:
                out[:, i] = ndimage.map_coordinates(self.values[..., i], coords, order=1, mode="nearest")
        return out

    def lift(self, u, exact=True):
        return self.plane.embed(u, self.evaluate(u, exact))

    def graph_points(self, radius=None):
        """Lifted grid nodes over the disk of the given radius."""
        mask = self.disk_mask(radius)
        return self.plane.embed(self.nodes()[mask], self.flat_values()[mask])

    def grid_lipschitz(self):
        """Largest difference quotient between grid neighbours inside the disk."""
        best = 0.0
        v = self.values
        inside = self.disk_mask().reshape(v.shape[:-1])
        for ax in range(self.d):
            sl_a = [slice(None)] * self.d
            sl_b = [slice(None)] * self.d
            sl_a[ax] = slice(1, None)
            sl_b[ax] = slice(None, -1)
            diff = np.linalg.norm(v[tuple(sl_a)] - v[tuple(sl_b)], axis=-1) / self.pitch
            ok = inside[tuple(sl_a)] & inside[tuple(sl_b)]
            if ok.any():
                best = max(best, float(diff[ok].max()))
        return best

    def with_values(self, values, lipschitz_bound=None, interp_order=None, **meta):
        return GraphPatch(
            self.plane,
            self.radius,
            self.pitch,
            self.half,
            self.lipschitz_bound if lipschitz_bound is None else lipschitz_bound,
            None,
            values,
            self.interp_order if interp_order is None else interp_order,
            dict(self.meta, **meta),
        )

    def to_json(self):
        return {
            "plane": self.plane.to_json(),
            "radius": self.radius,
            "pitch": self.pitch,
            "lipschitz_bound": self.lipschitz_bound,
            "shape": list(self.values.shape),
            "values": self.values.ravel().tolist(),
        }


def patch_grid(radius, pitch_target):
    """Half-width K and exact pitch radius / K for a grid of pitch <= target."""
    half = max(1, int(math.ceil(radius / pitch_target - 1e-9)))
    return half, radius / half


def _grid_nodes(d, half, pitch):
    ax = np.arange(-half, half + 1) * pitch
    return np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)


def _axis_plane(d, c):
    frame = np.eye(d + c)[:d]
    return AffinePlane(np.zeros(d + c), frame)


def lipschitz_ratio_check(S, x, P: AffinePlane, r, budget=None, eps=None):
    """Graph test of the points of S inside B(x, r) over P.

    Returns ``(ok, constant, witness)`` where ``constant`` is the largest
    ratio |dN| / |dT| over pairs; pairs whose tangential distance is below
    ``1e-12 r`` are not divided.  ``ok`` compares the constant with
    ``budget * eps`` (always true without a budget).

    Raises
    ------
    DegeneratePair
        Two points with the same projection but distinct normal parts.
    """
    S = np.asarray(S, dtype=float)
    x = np.asarray(x, dtype=float)
    d2 = ((S - x) ** 2).sum(1)
    pts = S[d2 < r * r]
    t = np.ascontiguousarray(P.tangential(pts))
    f = np.ascontiguousarray(P.normal_coords(pts))
    flag = np.ones(pts.shape[0], dtype=np.uint8)
    best, i, j, nvert, vi, vj, ndup = K.pair_ratio_max(t, f, flag, TINY * r, TINY * r)
    if nvert:
        raise DegeneratePair(
            "two points share a projection but differ normally",
            y=pts[vi].tolist(),
            z=pts[vj].tolist(),
            count=int(nvert),
        )
    witness = {"pair": None if i < 0 else (pts[i].tolist(), pts[j].tolist()), "coincident": int(ndup)}
    ok = True
    if budget is not None and eps is not None:
        ok = best <= budget * eps
    return ok, float(best), witness


def lipschitz_extend(sites, values, L, domain_radius, plane=None, pitch=None):
    """Componentwise McShane midpoint extension sampled on a patch grid.

    Parameters
    ----------
    sites : (k, d) array
        Tangential coordinates of the data.
    values : (k, c) array
    L : float
        Lipschitz constant; the data must obey it.
    domain_radius : float
    plane : AffinePlane, optional
        Defaults to the first d coordinate axes of R^(d+c).
    pitch : float, optional
        Defaults to ``domain_radius / 64``.
    """
    sites = np.ascontiguousarray(np.atleast_2d(np.asarray(sites, dtype=float)))
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    values = np.ascontiguousarray(values)
    k, d = sites.shape
    c = values.shape[1]
    if plane is None:
        plane = _axis_plane(d, c)
    if k > 1:
        flag = np.ones(k, dtype=np.uint8)
        scale = max(domain_radius, float(np.abs(sites).max()))
        best, i, j, nvert, vi, vj, _ = K.pair_ratio_max(sites, values, flag, TINY * scale, TINY * scale)
        if nvert or best > L * (1 + 1e-9) + TINY:
            raise SamplesNotLipschitz(
                f"data ratio {best:.6g} exceeds L = {L:.6g}",
                ratio=float(best),
                L=float(L),
                vertical_pairs=int(nvert),
            )
    half, pitch = patch_grid(domain_radius, domain_radius / 64 if pitch is None else pitch)
    fn = GraphFunction(sites, values, float(L), np.zeros((1, c)), 1.0, 0)
    patch = GraphPatch(plane, float(domain_radius), pitch, half, math.sqrt(c) * L, fn)
    patch.values  # sample now; the grid is the stored description
    return patch


def _fit_baseline(t, f, scale, degree):
    """Least-squares polynomial of degree <= ``degree``, lowered until the
    design matrix has full rank and enough rows."""
    for deg in range(degree, -1, -1):
        A = _monomials(t / scale, deg)
        if A.shape[0] < 2 * A.shape[1] and deg > 0:
            continue
        coef, _, rank, sv = np.linalg.lstsq(A, f, rcond=None)
        if rank == A.shape[1] and (sv.size == 0 or sv[-1] > 1e-8 * sv[0]):
            return coef, deg
    return np.zeros((1, f.shape[1])), 0


def _baseline_lipschitz(coef, deg, scale, d, radius):
    """Max gradient norm of the baseline over the disk (the gradient is
    affine, so its norm peaks on the rim)."""
    if deg == 0:
        return 0.0
    if d == 1:
        pts = np.array([[-radius], [radius]])
    else:
        ang = np.linspace(0, 2 * np.pi, 721)[:-1]
        pts = radius * np.stack([np.cos(ang), np.sin(ang)] + [np.zeros_like(ang)] * (d - 2), axis=1)
        pts = np.vstack([pts, -pts, np.zeros((1, d))])
    c = coef.shape[1]
    jac = np.zeros((pts.shape[0], c, d))
    s = pts / scale
    for i in range(d):
        jac[:, :, i] = coef[1 + i] / scale
    if deg >= 2:
        col = 1 + d
        for i in range(d):
            for j in range(i, d):
                jac[:, :, i] += coef[col] * s[:, j, None] / scale
                jac[:, :, j] += coef[col] * s[:, i, None] / scale
                col += 1
    return float(np.linalg.norm(jac, ord=2, axis=(1, 2)).max())


def graph_extension(t, f, radius, pitch, plane, degree=2):
    """Baseline polynomial plus McShane extension of the residual."""
    t = np.ascontiguousarray(t)
    f = np.ascontiguousarray(f)
    d, c = t.shape[1], f.shape[1]
    scale = radius / 4
    coef, deg = _fit_baseline(t, f, scale, degree)
    resid = np.ascontiguousarray(f - _monomials(t / scale, deg) @ coef)
    L = 0.0
    if t.shape[0] > 1:
        L, *_ = K.pair_ratio_max(t, resid, np.ones(t.shape[0], dtype=np.uint8), TINY * radius, TINY * radius)
    L = L * (1 + 1e-12) + TINY
    fn = GraphFunction(t, resid, L, coef, scale, deg)
    half, pitch = patch_grid(radius, pitch)
    lip = math.sqrt(c) * L + _baseline_lipschitz(coef, deg, scale, d, radius)
    return GraphPatch(plane, float(radius), pitch, half, lip, fn, meta={"baseline_degree": deg, "residual_L": L})


@dataclass
class SurfaceAtlas:
    """Union of graph patches plus a dense sample of the glued set."""

    E: PointCloud
    net: ColoredNet
    planes: list
    eps: float
    config: BuildConfig
    stage: int | str
    patches: dict
    point_sample: np.ndarray
    sample_stage: np.ndarray  # stage that added each sample (0 = net)
    sample_origin: np.ndarray  # net position of the creating patch (-1 = net point)
    tol_graph: float
    spacing: float
    constants: dict = field(default_factory=dict)
    certificates: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    _tree: cKDTree | None = field(default=None, repr=False)

    @property
    def a(self):
        return self.net.a

    @property
    def r0(self):
        return self.E.r0

    @property
    def tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.point_sample)
        return self._tree

    def to_json(self, include_patches=True):
        out = {
            "stage": self.stage,
            "r0": self.r0,
            "a": self.a,
            "epsilon": self.eps,
            "tol_graph": self.tol_graph,
            "spacing": self.spacing,
            "n_samples": int(self.point_sample.shape[0]),
            "net": self.net.to_json(),
            "constants": self.constants,
            "certificates": self.certificates,
            "config": self.config.to_json(),
        }
        if include_patches:
            out["patches"] = {str(k): p.to_json() for k, p in sorted(self.patches.items())}
        return out


def measure_epsilon(E: PointCloud, positions, coords, cfg: BuildConfig, deadline: Deadline | None = None):
    """PCA plane at every net point and the largest d_{x, r0} over the
    interior ones.

    For d >= 2 the plane side uses a coarse grid; the covering radius of that
    grid is added to the plane-to-set sup so the value stays an upper bound.
    """
    r0 = E.r0
    d = E.d
    if cfg.flatness_pitch is not None:
        pitch = cfg.flatness_pitch * r0
    elif d == 1:
        pitch = min(E.sample_gap, r0 / 200) if E.sample_gap > 0 else r0 / 200
    else:
        pitch = r0 / 25
    cover = 0.0 if d == 1 else 0.5 * pitch * math.sqrt(d)
    interior = np.ones(len(positions), dtype=bool) if E.interior is None else E.interior[positions]
    pts_all = E.points
    planes = []
    eps = 0.0
    where = None
    for k, x in enumerate(coords):
        if deadline is not None and k % 64 == 0:
            deadline.check("flatness measurement")
        diff = pts_all[E.tree.query_ball_point(x, r0)] - x
        w, v = np.linalg.eigh(diff.T @ diff / (r0 * r0))
        top = v[:, np.argsort(w)[::-1][:d]]
        P = AffinePlane(x, canonical_basis(top @ top.T, d))
        planes.append(P)
        if not interior[k]:
            continue
        s1 = float(np.linalg.norm(diff - (diff @ P.frame.T) @ P.frame, axis=1).max())
        grid = plane_ball_grid(P, x, r0, pitch)
        s2 = float(E.tree.query(grid)[0].max()) + cover
        val = (s1 + s2) / r0
        if val > eps:
            eps, where = val, k
    return planes, eps, where, pitch

def plane_budgets(N, c):
    """Budgets for the ratio constants: A'_0 from the net spacing, then
    A_j = sqrt(c) A'_j and A'_{j+1} = A_j + 100."""
    Ap = [128.0]
    A = []
    for _ in range(N):
        A.append(math.sqrt(c) * Ap[-1])
        Ap.append(A[-1] + 100.0)
    return Ap, A


def _frames(planes, positions):
    fr = np.ascontiguousarray(np.stack([planes[p].frame for p in positions]))
    nf = np.ascontiguousarray(np.stack([planes[p].normal_frame for p in positions]))
    return fr, nf


def initial_atlas(E: PointCloud, cfg: BuildConfig | None = None, deadline: Deadline | None = None) -> SurfaceAtlas:
    """Stage 0: the net, its coloring, the planes and the measured epsilon."""
    cfg = cfg or BuildConfig()
    E.require_resolution()
    a = cfg.a_ratio * E.r0
    X = maximal_net(E, a)
    net = color_net(E, X, a)
    planes, eps, where, fpitch = measure_epsilon(E, X, net.coords, cfg, deadline)
    if eps > cfg.epsilon_budget:
        raise FlatnessBudgetExceeded(
            f"measured epsilon {eps:.4g} exceeds budget {cfg.epsilon_budget:.4g}",
            epsilon=eps,
            budget=cfg.epsilon_budget,
            x=net.coords[where].tolist() if where is not None else None,
        )
    tol = cfg.tol_factor * E.sample_gap
    if tol == 0:
        tol = 1e-9 * E.r0
    c = E.n - E.d
    rho = cfg.spacing_factor * tol
    per_patch = (6 * a / rho + 1) ** E.d * (8 * a / rho + 1) ** E.d
    work = float(len(X)) * per_patch
    if work > cfg.max_work:
        raise ResourceLimitExceeded(
            f"estimated extension work {work:.3g} exceeds max_work {cfg.max_work:.3g}",
            net_size=int(len(X)),
            work_per_patch=per_patch,
        )
    Ap, A = plane_budgets(net.N, c)
    atlas = SurfaceAtlas(
        E=E,
        net=net,
        planes=planes,
        eps=float(eps),
        config=cfg,
        stage=0,
        patches={},
        point_sample=net.coords.copy(),
        sample_stage=np.zeros(len(X), dtype=np.int64),
        sample_origin=np.full(len(X), -1, dtype=np.int64),
        tol_graph=float(tol),
        spacing=float(cfg.spacing_factor * tol),
        constants={"A_prime_budget": Ap, "A_budget": A, "A_prime": [], "A": [], "slope": []},
        extra={"flatness_pitch": fpitch, "work_estimate": work},
    )
    # base case: the net itself over every plane
    ratios = _verify_balls(atlas, np.arange(len(X)), np.arange(len(X)), np.ones(len(X), dtype=np.uint8), 0)
    atlas.constants["slope"].append(ratios)
    atlas.constants["A_prime"].append(ratios / eps if eps > 0 else 0.0)
    return atlas


def _verify_balls(atlas: SurfaceAtlas, positions, local, is_new, stage):
    """Re-check the graph property over P_x inside B(x, 4a) for the net
    positions given, counting only pairs with a new point.  ``local`` indexes
    the samples that may fall in those balls."""
    if len(positions) == 0:
        return 0.0
    positions = np.asarray(positions, dtype=np.int64)
    local = np.asarray(local, dtype=np.int64)
    coords = np.ascontiguousarray(atlas.net.coords[positions])
    fr, nf = _frames(atlas.planes, positions)
    best, wit, nvert = K.ball_ratio_local(
        np.ascontiguousarray(atlas.point_sample[local]),
        np.ascontiguousarray(is_new[local], dtype=np.uint8),
        coords, fr, nf, 4 * atlas.a, TINY * atlas.r0, TINY * atlas.r0,
    )
    budget = atlas.constants["A_prime_budget"][stage] * atlas.eps
    limit = min(budget, atlas.config.slope_cap) if atlas.eps > 0 else atlas.config.slope_cap
    bad = np.flatnonzero((nvert > 0) | (best > limit))
    if bad.size:
        b = int(bad[0])
        if nvert[b]:
            y, z = local[wit[b, 2]], local[wit[b, 3]]
            reason = "vertical pair"
        else:
            y, z = local[wit[b, 0]], local[wit[b, 1]]
            reason = f"ratio {best[b]:.4g} above limit {limit:.4g}"
        o = atlas.sample_origin
        case = 1 if (atlas.sample_stage[y] == stage and atlas.sample_stage[z] == stage and o[y] == o[z]) else 2
        raise StageInvariantViolated(
            f"stage {stage}: graph property fails at net point {int(positions[b])} ({reason}, case {case})",
            stage=stage,
            case=case,
            x=coords[b].tolist(),
            y=atlas.point_sample[y].tolist(),
            z=atlas.point_sample[z].tolist(),
            ratio=float(best[b]),
            limit=float(limit),
        )
    return float(best.max())


def build_stage(atlas: SurfaceAtlas, j: int, deadline: Deadline | None = None) -> SurfaceAtlas:
    """Add the patches of color j and re-verify the graph property."""
    cfg = atlas.config
    a = atlas.a
    E = atlas.E
    members = atlas.net.members(j)
    radius = cfg.patch_factor * a
    pitch = radius / cfg.pitch_divisor
    rho = atlas.spacing
    half_c, pitch_c = patch_grid(3 * a, 0.5 * rho)
    cand = _grid_nodes(E.d, half_c, pitch_c)
    cand = np.ascontiguousarray(cand[(cand ** 2).sum(1) < (3 * a) ** 2])
    tree = atlas.tree
    limit = min(atlas.constants["A_prime_budget"][j - 1] * atlas.eps, cfg.slope_cap)
    new_pts, new_origin = [], []
    patches = dict(atlas.patches)
    ext_ratio = 0.0
    for k, p in enumerate(members):
        if deadline is not None and k % 16 == 0:
            deadline.check(f"stage {j}")
        w = atlas.net.coords[p]
        P = atlas.planes[p]
        idx = tree.query_ball_point(w, 4 * a)
        pts = atlas.point_sample[idx]
        t = np.ascontiguousarray(P.tangential(pts))
        f = np.ascontiguousarray(P.normal_coords(pts))
        ratio, bi, bj, nvert, vi, vj, _ = K.pair_ratio_max(
            t, f, np.ones(len(idx), dtype=np.uint8), TINY * atlas.r0, TINY * atlas.r0
        )
        if nvert or ratio > limit:
            y, z = (vi, vj) if nvert else (bi, bj)
            raise StageInvariantViolated(
                f"stage {j}: data near net point {int(p)} is not a graph within budget",
                stage=j,
                case="extraction",
                x=w.tolist(),
                y=pts[y].tolist(),
                z=pts[z].tolist(),
                ratio=float(ratio),
                limit=float(limit),
            )
        ext_ratio = max(ext_ratio, ratio)
        patch = graph_extension(t, f, radius, pitch, P, cfg.baseline_degree)
        patch.meta.update(stage=j, data_ratio=float(ratio))
        patches[int(p)] = patch
        lifted = P.embed(cand, patch.function(cand))
        lifted = lifted[((lifted - w) ** 2).sum(1) < (3 * a) ** 2]
        if lifted.shape[0] == 0:
            continue
        dist, _ = tree.query(lifted, distance_upper_bound=rho)
        lifted = lifted[~(dist < rho)]
        if lifted.shape[0] == 0:
            continue
        lifted = lifted[greedy_separated(lifted, rho)]
        new_pts.append(lifted)
        new_origin.append(np.full(lifted.shape[0], p, dtype=np.int64))
    if new_pts:
        add = np.vstack(new_pts)
        origin = np.concatenate(new_origin)
    else:
        add = np.zeros((0, E.n))
        origin = np.zeros(0, dtype=np.int64)
    out = SurfaceAtlas(
        E=E,
        net=atlas.net,
        planes=atlas.planes,
        eps=atlas.eps,
        config=cfg,
        stage=j,
        patches=patches,
        point_sample=np.vstack([atlas.point_sample, add]),
        sample_stage=np.concatenate([atlas.sample_stage, np.full(add.shape[0], j, dtype=np.int64)]),
        sample_origin=np.concatenate([atlas.sample_origin, origin]),
        tol_graph=atlas.tol_graph,
        spacing=atlas.spacing,
        constants={k: list(v) if isinstance(v, list) else v for k, v in atlas.constants.items()},
        certificates=dict(atlas.certificates),
        extra=dict(atlas.extra),
    )
    is_new = np.zeros(out.point_sample.shape[0], dtype=np.uint8)
    is_new[atlas.point_sample.shape[0]:] = 1
    slope = 0.0
    if add.shape[0]:
        net_tree = cKDTree(atlas.net.coords)
        for p in np.unique(origin):
            w = atlas.net.coords[p]
            affected = net_tree.query_ball_point(w, 7 * a)
            local = out.tree.query_ball_point(w, 11 * a)
            slope = max(slope, _verify_balls(out, affected, local, is_new, j))
    slope = max(slope, out.constants["slope"][-1])
    out.constants["slope"].append(slope)
    out.constants["A_prime"].append(slope / out.eps if out.eps > 0 else 0.0)
    lips = [pt.lipschitz_bound for k, pt in patches.items() if pt.meta.get("stage") == j]
    A = max(lips) if lips else 0.0
    out.constants["A"].append(A / out.eps if out.eps > 0 else 0.0)
    out.constants.setdefault("extraction_slope", []).append(ext_ratio)
    return out


def certify_atlas(atlas: SurfaceAtlas):
    """Bilateral proximity to E and the local graph identity at every net point.

    Distances from E to the glued set use the exact patch maps: a sample y of
    E is within |f_y - F_x(t_y)| of the graph of the nearest net point x.
    """
    E = atlas.E
    a = atlas.a
    tree = atlas.tree
    S = atlas.point_sample
    net_tree = cKDTree(atlas.net.coords)
    # (ii) glued samples to E
    use_S = np.ones(S.shape[0], dtype=bool)
    dist_SE, near = E.tree.query(S)
    if E.interior is not None:
        use_S = E.interior[near]
    sup_SE = float(dist_SE[use_S].max()) if use_S.any() else 0.0
    # (i) E to the glued set
    e_idx = E.center_indices()
    pts = E.points[e_idx]
    d_samp, _ = tree.query(pts)
    _, owner = net_tree.query(pts)
    d_graph = np.full(pts.shape[0], np.inf)
    for p in np.unique(owner):
        sel = np.flatnonzero(owner == p)
        patch = atlas.patches.get(int(p))
        if patch is None:
            continue
        P = patch.plane
        t = P.tangential(pts[sel])
        f = P.normal_coords(pts[sel])
        d_graph[sel] = np.linalg.norm(f - patch.evaluate(t), axis=1)
    d_ES = np.minimum(d_samp, d_graph)
    sup_ES = float(d_ES.max())
    # local graph identity inside B(x, 2a)
    worst_in, worst_out = 0.0, 0.0
    where_in = where_out = None
    lists = tree.query_ball_point(atlas.net.coords, 2 * a)
    half_c, pitch_c = patch_grid(2 * a, 0.5 * atlas.spacing)
    cand = _grid_nodes(E.d, half_c, pitch_c)
    cand = cand[(cand ** 2).sum(1) < (2 * a) ** 2]
    for p, idx in enumerate(lists):
        patch = atlas.patches.get(p)
        if patch is None:
            continue
        P = patch.plane
        y = S[idx]
        dev = np.linalg.norm(P.normal_coords(y) - patch.evaluate(P.tangential(y)), axis=1)
        if dev.size and dev.max() > worst_in:
            worst_in, where_in = float(dev.max()), p
        g = patch.lift(cand)
        g = g[((g - atlas.net.coords[p]) ** 2).sum(1) < (2 * a) ** 2]
        if g.shape[0]:
            dd, _ = tree.query(g)
            if dd.max() > worst_out:
                worst_out, where_out = float(dd.max()), p
    scale = atlas.eps * atlas.r0
    C0 = max(sup_ES, sup_SE) / scale if scale > 0 else float("inf")
    cert = {
        "sup_E_to_S": sup_ES,
        "sup_S_to_E": sup_SE,
        "C0": C0,
        "eps_r0": scale,
        "graph_identity_samples_to_graph": worst_in,
        "graph_identity_graph_to_samples": worst_out,
        "graph_identity_worst_net_points": [where_in, where_out],
        "tol_graph": atlas.tol_graph,
        "graph_identity_ok": bool(worst_in <= atlas.tol_graph and worst_out <= atlas.tol_graph),
    }
    atlas.certificates.update(cert)
    return cert


def build_surface(E: PointCloud, epsilon_budget=None, config: BuildConfig | None = None,
                  deadline: Deadline | None = None) -> SurfaceAtlas:
    """Run every stage and certify the result.

    ``deadline`` defaults to a fresh clock with ``config.max_seconds``.

    Raises
    ------
    FlatnessBudgetExceeded
        Measured epsilon at r0 is above the budget.
    StageInvariantViolated
        The graph property broke at some stage.
    ResourceLimitExceeded
        The work estimate or the time budget is exceeded.
    """
    cfg = BuildConfig() if config is None else config
    if epsilon_budget is not None:
        cfg = BuildConfig(**dict(asdict(cfg), epsilon_budget=float(epsilon_budget)))
    deadline = deadline or Deadline(cfg.max_seconds)
    atlas = initial_atlas(E, cfg, deadline)
    for j in range(1, atlas.net.N + 1):
        atlas = build_stage(atlas, j, deadline)
    deadline.check("certification")
    certify_atlas(atlas)
    if not atlas.certificates["graph_identity_ok"]:
        raise StageInvariantViolated(
            "local graph identity fails near a net point",
            **{k: atlas.certificates[k] for k in (
                "graph_identity_samples_to_graph", "graph_identity_graph_to_samples",
                "graph_identity_worst_net_points", "tol_graph")},
        )
    return atlas


def plane_compatibility_check(planes, coords, r0, eps, pitch=None, max_pairs=20000):
    """Pairwise comparison of the planes of net points at most r0/2 apart.

    Distances are taken inside B(x, r0/4) with both planes on their own base
    points; projector differences in operator norm.  When there are more
    than ``max_pairs`` pairs an evenly strided subset is examined.
    """
    from .geometry import plane_plane_distance

    coords = np.asarray(coords, dtype=float)
    pairs = cKDTree(coords).query_pairs(0.5 * r0, output_type="ndarray")
    total = int(pairs.shape[0])
    if total > max_pairs:
        pairs = pairs[np.linspace(0, total - 1, max_pairs).astype(np.int64)]
    pitch = r0 / 4 / 50 if pitch is None else pitch
    worst_d, worst_op = 0.0, 0.0
    violations = []
    for i, j in pairs:
        P, Q = planes[i], planes[j]
        dist = plane_plane_distance(P, Q, coords[i], r0 / 4, pitch)
        op = float(np.linalg.norm(P.projector() - Q.projector(), ord=2))
        worst_d = max(worst_d, dist)
        worst_op = max(worst_op, op)
        if dist > 8 * eps or op > 100 * eps:
            violations.append({"i": int(i), "j": int(j), "distance": dist, "projector_gap": op})
    return {
        "pairs_total": total,
        "pairs_checked": int(pairs.shape[0]),
        "max_distance": worst_d,
        "max_projector_gap": worst_op,
        "distance_budget": 8 * eps,
        "projector_budget": 100 * eps,
        "violations": violations,
        "ok": not violations,
    }
