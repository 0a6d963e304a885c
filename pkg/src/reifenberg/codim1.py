"""Hypersurface case: orientation, offsets, inner domains and components.

Everything here works on the smoothed atlas of a set of codimension one.
Samples are pushed along a consistently oriented unit normal to obtain two
offset sets; the complement of each offset is flood-filled on a uniform grid
and the side that does not meet the central surface is the inner domain.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import _kernels as K
from .errors import (
    ComponentCountMismatch,
    ContractionFailure,
    DisconnectedAtlas,
    InputError,
    NestingViolated,
    NotChainConnected,
    OrientationConflict,
    ResolutionTooCoarse,
    ResourceLimitExceeded,
    SandwichViolated,
    SideSelectionAmbiguous,
    UnsupportedCodimension,
)
from .geometry import AffinePlane, PointCloud, canonical_basis, plane_plane_distance, pca_plane
from .smooth import SmoothingConfig, smooth_surface
from .surface import BuildConfig, GraphPatch, SurfaceAtlas, _grid_nodes, build_surface, patch_grid

BOUNDARY = -1


@dataclass
class DomainConfig:
    """Constants of the hypersurface construction.

    ``C0_floor`` bounds the proximity constant from below; ``grid_divisor``
    sets the cell size ``C0 eps r / grid_divisor``.
    """

    epsilon_budget: float = 1.0
    C0_floor: float = 1.0
    offset_factor: float = 5.0
    anchor_factor: float = 7.5
    grid_divisor: float = 4.0
    box_margin: float = 1.0  # box = bounding box of E inflated by box_margin * r0 ...
    box_units: float = 9.0  # ... or by box_units * C0 eps r when that is larger (anchors sit at 7.5)
    e_grid_divisor: float = 12.0  # E labeling cell = r_min / e_grid_divisor
    max_cells: float = 8e7
    offset_patches: int = 400  # offset graphs computed at most at this many net points
    normal_jump: float = 0.2
    overlap_angle: float = 0.1
    kernel_width: float = 0.1
    a_ratio: float = 1.0 / 32
    k_max: int = 3

    def to_json(self):
        return asdict(self)

    def build_config(self):
        return BuildConfig(epsilon_budget=self.epsilon_budget, a_ratio=self.a_ratio)

    def smoothing_config(self):
        return SmoothingConfig(kernel_width=self.kernel_width, k_max=self.k_max,
                               kernel_order=max(5, self.k_max + 2))


# ---------------------------------------------------------------------------
# grids and labelings


@dataclass
class GridSpec:
    """Cells ``lo + (i + 1/2) h`` for ``0 <= i < shape`` along each axis."""

    lo: np.ndarray
    h: float
    shape: tuple

    @property
    def n(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    def centers(self, flat=None):
        if flat is None:
            flat = np.arange(self.size)
        idx = np.stack(np.unravel_index(np.asarray(flat, dtype=np.int64), self.shape), axis=1)
        return self.lo + (idx + 0.5) * self.h

    def locate(self, pts):
        """Flat index of the cell containing each point, -1 outside the box."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        idx = np.floor((pts - self.lo) / self.h).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)
        out = np.full(pts.shape[0], -1, dtype=np.int64)
        if inside.any():
            out[inside] = np.ravel_multi_index(idx[inside].T, self.shape)
        return out

    def refined(self, factor):
        factor = int(factor)
        return GridSpec(self.lo.copy(), self.h / factor, tuple(s * factor for s in self.shape))

    def to_json(self):
        return {"lo": self.lo.tolist(), "h": self.h, "shape": list(self.shape)}


def bounding_grid(E: PointCloud, h, margin=None):
    """Grid over the bounding box of E inflated by ``margin`` (default r0)."""
    margin = E.r0 if margin is None else margin
    lo = E.points.min(0) - margin
    hi = E.points.max(0) + margin
    shape = tuple(int(math.ceil((b - a) / h - 1e-9)) for a, b in zip(lo, hi))
    return GridSpec(lo, float(h), shape)


def _check_budget(grid: GridSpec, max_cells):
    if grid.size > max_cells:
        raise ResourceLimitExceeded(
            f"grid of {grid.size:.3g} cells exceeds max_cells {max_cells:.3g}",
            cells=grid.size,
            h=grid.h,
            shape=list(grid.shape),
        )


def mark_near(grid: GridSpec, pts, radius, chunk=2_000_000):
    """Boolean mask of the cells whose centers lie within ``radius`` of a point.

    Candidates are the cells within the stencil of an occupied cell; each is
    settled by an exact nearest-point query.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    mask = np.zeros(grid.size, dtype=bool)
    if pts.shape[0] == 0:
        return mask
    n = grid.n
    h = grid.h
    m = int(math.ceil(radius / h)) + 1
    offs = np.stack(np.meshgrid(*([np.arange(-m, m + 1)] * n), indexing="ij"), axis=-1).reshape(-1, n)
    # keep offsets whose cell can reach a point of the base cell
    offs = offs[np.sqrt(((np.abs(offs) - 1).clip(0) ** 2).sum(1)) * h <= radius]
    shape = np.asarray(grid.shape)
    base = np.unique(np.floor((pts - grid.lo) / h).astype(np.int64), axis=0)
    tree = cKDTree(pts)
    step = max(1, chunk // max(1, offs.shape[0]))
    for s in range(0, base.shape[0], step):
        cells = (base[s:s + step, None, :] + offs[None]).reshape(-1, n)
        cells = cells[np.all((cells >= 0) & (cells < shape), axis=1)]
        flat = np.unique(np.ravel_multi_index(cells.T, grid.shape))
        flat = flat[~mask[flat]]
        if flat.size == 0:
            continue
        dist, _ = tree.query(grid.centers(flat), distance_upper_bound=radius * (1 + 1e-12))
        mask[flat[dist <= radius]] = True
    return mask


@dataclass
class ComponentLabeling:
    """Flood-fill labels of the complement of a dilated obstacle."""

    grid: GridSpec
    labels: np.ndarray  # flat int32, BOUNDARY for blocked cells
    count: int
    volumes: np.ndarray
    representatives: np.ndarray
    obstacle: str
    dilation: float

    def label_at(self, pts):
        flat = self.grid.locate(pts)
        out = np.full(flat.shape[0], BOUNDARY, dtype=np.int64)
        ok = flat >= 0
        out[ok] = self.labels[flat[ok]]
        return out

    def labels_met(self, grid: GridSpec, mask, chunk=1 << 22):
        """Sorted labels (BOUNDARY excluded) met by the centers of the ``mask`` cells of ``grid``."""
        flat = np.flatnonzero(mask)
        seen = set()
        for s in range(0, flat.size, chunk):
            lab = self.label_at(grid.centers(flat[s:s + chunk]))
            seen.update(np.unique(lab[lab >= 0]).tolist())
        return sorted(seen)

    def to_json(self):
        return {
            "grid": self.grid.to_json(),
            "count": self.count,
            "volumes": self.volumes.tolist(),
            "cell_volume": self.grid.h ** self.grid.n,
            "representatives": self.grid.centers(self.representatives).tolist(),
            "obstacle": self.obstacle,
            "dilation": self.dilation,
        }


def label_components(obstacle, grid: GridSpec, dilation=None, resolve=None, name="obstacle",
                     max_cells=8e7) -> ComponentLabeling:
    """Face-connected components of the grid cells away from the obstacle.

    Cells whose centers are within ``dilation`` (default ``grid.h``) of an
    obstacle point are BOUNDARY.

    Raises
    ------
    ResolutionTooCoarse
        ``grid.h`` is above ``resolve``.
    """
    if resolve is not None and grid.h > resolve * (1 + 1e-9):
        raise ResolutionTooCoarse(f"cell size {grid.h:.4g} above {resolve:.4g}", h=grid.h, required=resolve)
    _check_budget(grid, max_cells)
    dil = grid.h if dilation is None else float(dilation)
    blocked = mark_near(grid, obstacle, dil)
    np.logical_not(blocked, out=blocked)
    labels, count, volumes, reps = K.flood_label(blocked.view(np.uint8), np.asarray(grid.shape, dtype=np.int64))
    del blocked
    return ComponentLabeling(grid, np.asarray(labels, dtype=np.int32), int(count),
                             np.asarray(volumes), np.asarray(reps), name, dil)


def chain_connected(E: PointCloud, rho) -> bool:
    """Whether the graph joining samples at distance <= rho is connected.

    A nearest-neighbour subgraph is tried first; only when it falls apart
    are all pairs within rho examined.
    """
    if rho <= 0:
        raise InputError("rho must be positive")
    m = len(E)
    if m == 1:
        return True

    def ncomp(i, j):
        g = coo_matrix((np.ones(i.size), (i, j)), shape=(m, m))
        return connected_components(g, directed=False)[0]

    k = min(m, 9)
    dist, idx = E.tree.query(E.points, k=k, distance_upper_bound=rho * (1 + 1e-12))
    ok = np.isfinite(dist) & (dist <= rho)
    rows = np.repeat(np.arange(m), k).reshape(m, k)
    if ncomp(rows[ok], idx[ok]) == 1:
        return True
    pairs = E.tree.query_pairs(rho, output_type="ndarray")
    return ncomp(pairs[:, 0], pairs[:, 1]) == 1


# ---------------------------------------------------------------------------
# orientation


@dataclass
class OrientedAtlas:
    atlas: SurfaceAtlas
    normals: np.ndarray  # (m, n) unit normals at the atlas samples
    signs: np.ndarray  # per net position, +1 or -1 relative to planes[p].normal_frame[0]
    owner: np.ndarray  # smoothed ball used for each sample normal
    report: dict = field(default_factory=dict)

    def patch_normal(self, pos):
        return self.signs[pos] * self.atlas.planes[pos].normal_frame[0]


def _patch_gradient(patch: GraphPatch, u, step=None):
    """Central-difference gradient of a scalar patch at rows of u."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    h = patch.pitch * 1e-2 if step is None else step
    g = np.empty(u.shape)
    for i in range(u.shape[1]):
        e = np.zeros(u.shape[1])
        e[i] = h
        g[:, i] = (patch.evaluate(u + e)[:, 0] - patch.evaluate(u - e)[:, 0]) / (2 * h)
    return g


def _unit_normal(P: AffinePlane, grad):
    """Unit normal (N - sum g_i T_i) / sqrt(1 + |g|^2) of a scalar graph over P."""
    nv = P.normal_frame[0][None, :] - grad @ P.frame
    return nv / np.linalg.norm(nv, axis=1, keepdims=True)


def _ball_normals(smoothed: SurfaceAtlas, y, balls):
    """Normals at points y read off the smoothed patch of the given balls
    (signs relative to each ball plane's normal_frame[0])."""
    out = np.full(y.shape, np.nan)
    for q in np.unique(balls[balls >= 0]):
        sel = np.flatnonzero(balls == q)
        H = smoothed.patches[int(q)]
        u = H.plane.tangential(y[sel])
        out[sel] = _unit_normal(H.plane, _patch_gradient(H, u))
    return out


def _fallback_normals(smoothed: SurfaceAtlas, y, pos):
    """Normals through the full evaluator over the plane of net position pos."""
    ev = smoothed.extra["evaluator"]
    P = smoothed.planes[pos]
    u = P.tangential(y)
    h = 1e-3 * smoothed.a
    tang = []
    for i in range(P.d):
        e = np.zeros(P.d)
        e[i] = h
        tang.append(ev.points(pos, u + e, smoothed.net.N) - ev.points(pos, u - e, smoothed.net.N))
    tang = np.stack(tang, axis=1)  # (k, d, n)
    out = np.empty(y.shape)
    N = P.normal_frame[0]
    for k in range(y.shape[0]):
        _, _, vt = np.linalg.svd(tang[k])
        v = vt[-1]
        out[k] = v if v @ N >= 0 else -v
    return out


def _require_codim1(atlas: SurfaceAtlas):
    if atlas.E.d != atlas.E.n - 1:
        raise UnsupportedCodimension(f"need d = n - 1, got d={atlas.E.d}, n={atlas.E.n}")


def orient(atlas: SurfaceAtlas, fixed_signs=None, cfg: DomainConfig | None = None) -> OrientedAtlas:
    """Consistent unit normals on a smoothed hypersurface atlas.

    Net points whose 3a/2 balls overlap are adjacent; the relative sign of two
    adjacent patches is the sign of the dot product of their plane normals.
    Signs are propagated breadth-first from the lowest index, whose plane
    normal is kept as is.  ``fixed_signs`` pins chosen patches beforehand.

    Raises
    ------
    DisconnectedAtlas
        The overlap graph has several components.
    OrientationConflict
        An edge receives inconsistent signs, or two overlapping plane
        normals are too far from parallel to compare.
    """
    cfg = cfg or DomainConfig()
    _require_codim1(atlas)
    if "evaluator" not in atlas.extra:
        raise InputError("orient needs a smoothed atlas")
    coords = atlas.net.coords
    nnet = coords.shape[0]
    a = atlas.a
    N = np.stack([P.normal_frame[0] for P in atlas.planes])
    pairs = cKDTree(coords).query_pairs(3 * a, output_type="ndarray")
    dots = (N[pairs[:, 0]] * N[pairs[:, 1]]).sum(1) if pairs.size else np.zeros(0)
    weak = np.abs(dots) < math.cos(math.pi / 3)
    if weak.any():
        i, j = pairs[np.flatnonzero(weak)[0]]
        raise OrientationConflict(
            "overlapping patches have nearly orthogonal planes",
            p=int(i), q=int(j), dot=float(dots[weak][0]),
        )
    rel = np.where(dots >= 0, 1, -1).astype(np.int8)
    if nnet > 1:
        g = coo_matrix((np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(nnet, nnet))
        ncomp, comp = connected_components(g, directed=False)
        if ncomp > 1:
            raise DisconnectedAtlas(f"patch overlap graph has {ncomp} components", components=int(ncomp))
    adj = [[] for _ in range(nnet)]
    for (i, j), s in zip(pairs, rel):
        adj[i].append((int(j), int(s)))
        adj[j].append((int(i), int(s)))
    signs = np.zeros(nnet, dtype=np.int8)
    for p, s in (fixed_signs or {}).items():
        signs[int(p)] = 1 if s > 0 else -1
    if signs[0] == 0:
        signs[0] = 1
    queue = deque([0])
    seen = np.zeros(nnet, dtype=bool)
    seen[0] = True
    while queue:
        p = queue.popleft()
        for q, s in adj[p]:
            if signs[q] == 0:
                signs[q] = signs[p] * s
            if not seen[q]:
                seen[q] = True
                queue.append(q)
    if pairs.size:
        bad = signs[pairs[:, 0]] * signs[pairs[:, 1]] * rel != 1
        if bad.any():
            i, j = pairs[np.flatnonzero(bad)[0]]
            raise OrientationConflict(
                f"patches {int(i)} and {int(j)} receive inconsistent orientations",
                p=int(i), q=int(j), conflicts=int(bad.sum()),
            )
    # sample normals from the owning smoothed ball
    ev = atlas.extra["evaluator"]
    S = atlas.point_sample
    first, second = ev.owners(S, atlas.net.N)
    normals = _ball_normals(atlas, S, first)
    ok = first >= 0
    normals[ok] *= signs[first[ok], None]
    if (~ok).any():
        _, near = cKDTree(coords).query(S[~ok])
        for p in np.unique(near):
            sel = np.flatnonzero(~ok)[near == p]
            normals[sel] = signs[p] * _fallback_normals(atlas, S[sel], int(p))
    # overlap agreement against the runner-up ball
    two = second >= 0
    alt = _ball_normals(atlas, S[two], second[two]) * signs[second[two], None]
    cosang = np.clip((alt * normals[two]).sum(1), -1, 1)
    overlap = float(np.arccos(cosang).max()) if two.any() else 0.0
    # variation between nearby samples
    r = atlas.r0
    near_pairs = atlas.tree.query_pairs(1e-3 * r, output_type="ndarray")
    if near_pairs.size:
        c = np.clip((normals[near_pairs[:, 0]] * normals[near_pairs[:, 1]]).sum(1), -1, 1)
        jump = float(np.arccos(c).max())
    else:
        jump = 0.0
    unit_err = float(np.abs(np.linalg.norm(normals, axis=1) - 1).max())
    report = {
        "root": 0,
        "edges": int(pairs.shape[0]),
        "flipped_patches": int((signs < 0).sum()),
        "overlap_max_angle": overlap,
        "overlap_ok": overlap < cfg.overlap_angle,
        "neighbour_pairs": int(near_pairs.shape[0]),
        "neighbour_max_angle": jump,
        "neighbour_ok": jump < cfg.normal_jump,
        "unit_error": unit_err,
        "fallback_samples": int((~ok).sum()),
    }
    return OrientedAtlas(atlas, normals, signs.astype(np.int64), first, report)


# ---------------------------------------------------------------------------
# offsets


def offset_graph(patch: GraphPatch, delta, sign, tol=1e-10, scale=None, max_iter=50, max_slope=0.1) -> GraphPatch:
    """Graph of the offset of a scalar patch at distance ``delta``.

    The patch point over u moves to xi(u) = (u, F(u)) + sign delta nu(u)
    with nu = (-grad F, 1) / sqrt(1 + |grad F|^2).  For each grid node t the
    equation pi(xi(u)) = t is solved by u <- u - (pi(xi(u)) - t), and the
    offset value is the normal part of xi(u).  Nodes whose preimage may leave
    the patch disk are NaN; ``radius`` of the result is the trusted disk.

    Raises
    ------
    ContractionFailure
        Slope above ``max_slope`` on the disk, or the iteration stalls.
    """
    if patch.c != 1:
        raise UnsupportedCodimension("offset_graph needs a scalar (codimension one) patch")
    scale = patch.radius if scale is None else scale
    nodes = patch.nodes()
    inside = (nodes ** 2).sum(1) <= patch.radius ** 2
    grad = _patch_gradient(patch, nodes[inside])
    slope = float(np.nanmax(np.linalg.norm(grad, axis=1))) if inside.any() else 0.0
    if not np.isfinite(slope) or slope > max_slope:
        raise ContractionFailure(f"patch slope {slope:.4g} above {max_slope}", slope=slope, limit=max_slope)
    shift = abs(delta) * slope / math.sqrt(1 + slope * slope)
    radius_out = patch.radius - shift - patch.pitch
    g = 2 * patch.half + 1
    vals = np.full(nodes.shape[0], np.nan)
    if radius_out > 0:
        tgt = (nodes ** 2).sum(1) <= radius_out ** 2
        t = nodes[tgt]
        u = t.copy()
        for it in range(max_iter):
            gr = _patch_gradient(patch, u)
            q = np.sqrt(1 + (gr ** 2).sum(1, keepdims=True))
            psi = u - sign * delta * gr / q
            res = psi - t
            err = float(np.abs(res).max()) if res.size else 0.0
            if err <= tol * scale:
                break
            u = u - res
        else:
            raise ContractionFailure(f"offset inversion did not converge ({err:.3g})", residual=err)
        gr = _patch_gradient(patch, u)
        q = np.sqrt(1 + (gr ** 2).sum(1))
        vals[tgt] = patch.evaluate(u)[:, 0] + sign * delta / q
    out = GraphPatch(patch.plane, max(radius_out, 0.0), patch.pitch, patch.half, 0.0, None,
                     vals.reshape((g,) * patch.d + (1,)), 1,
                     dict(patch.meta, offset=float(sign * delta), source_slope=slope))
    if radius_out > 0:
        out.lipschitz_bound = _nan_grid_lipschitz(out)
    return out


def _nan_grid_lipschitz(patch: GraphPatch):
    v = patch.values[..., 0]
    best = 0.0
    for ax in range(patch.d):
        diff = np.abs(np.diff(v, axis=ax)) / patch.pitch
        if np.isfinite(diff).any():
            best = max(best, float(np.nanmax(diff)))
    return best


def tangent_patch(H: GraphPatch, radius, pitch, normal=None):
    """Re-express a scalar patch as a graph over its tangent plane at u = 0."""
    foot = H.lift(np.zeros((1, H.d)))[0]
    nrm = _unit_normal(H.plane, _patch_gradient(H, np.zeros((1, H.d))))[0] if normal is None else normal
    frame = canonical_basis(np.eye(H.plane.n) - np.outer(nrm, nrm), H.d)
    T = AffinePlane(foot, frame)
    half, pitch = patch_grid(radius, pitch)
    t = _grid_nodes(H.d, half, pitch)
    M = T.frame @ H.plane.frame.T
    Minv = np.linalg.inv(M)
    v = H.plane.tangential(T.embed(t))
    for _ in range(50):
        p = H.plane.embed(v, H.evaluate(v))
        step = (t - T.tangential(p)) @ Minv.T
        v = v + step
        if np.abs(step).max() <= 1e-13 * max(radius, 1e-300):
            break
    p = H.plane.embed(v, H.evaluate(v))
    vals = T.normal_coords(p)
    vals[(v ** 2).sum(1) > H.radius ** 2] = np.nan
    g = 2 * half + 1
    out = GraphPatch(T, radius, pitch, half, 0.0, None, vals.reshape((g,) * H.d + (1,)), H.interp_order)
    if not np.all(np.isfinite(out.values)):
        raise ContractionFailure("tangent re-graphing left the source patch")
    sgn = 1 if T.normal_frame[0] @ nrm >= 0 else -1
    return out, sgn


@dataclass
class OffsetPair:
    sigma1: SurfaceAtlas
    sigma2: SurfaceAtlas
    delta: float
    certificates: dict = field(default_factory=dict)


def surface_cover(smoothed: SurfaceAtlas):
    """Bound on the distance from the smoothed surface to its sample."""
    c = smoothed.certificates
    return float(c.get("graph_identity_graph_to_samples", smoothed.tol_graph)) + 2 * float(c.get("moved", 0.0))


def offset_surfaces(oriented: OrientedAtlas, r, C0, eps, cfg: DomainConfig | None = None,
                    check=True) -> OffsetPair:
    """Push every sample by +-delta along its normal, delta = 5 C0 eps r.

    Certificates, per offset sample xi (unit = C0 eps r):
    - upper: |xi - y| = delta <= 5 unit, y being a point of the surface;
    - lower: no surface sample within 4 unit + cover, where cover bounds
      the distance from the surface to its sample;
    - no sample of E within 3 unit, and one within 6 unit.
    The counts are exhaustive; exact distances are also reported for an
    evenly strided subset of samples.
    Offset graphs of tangent re-graphed ball patches are compared with the
    offset samples at a strided subset of net points.

    Raises
    ------
    SandwichViolated
        Some sample leaves its band (only when ``check``).
    """
    cfg = cfg or DomainConfig()
    atlas = oriented.atlas
    E = atlas.E
    S = atlas.point_sample
    nrm = oriented.normals
    unit = C0 * eps * r
    delta = cfg.offset_factor * unit
    cover = surface_cover(atlas)
    _, foot_e = E.tree.query(S)
    use = np.ones(S.shape[0], dtype=bool) if E.interior is None else E.interior[foot_e]
    cert = {"delta": delta, "unit": unit, "surface_cover": cover, "samples": int(use.sum())}
    sets = {}
    viol = None
    rt = 1e-9
    probe = np.unique(np.linspace(0, S.shape[0] - 1, min(S.shape[0], 2000)).astype(np.int64))
    for j, sgn in ((1, 1.0), (2, -1.0)):
        xi = S + sgn * delta * nrm
        sets[j] = xi
        # |xi - y| = delta bounds the distance to the surface sample from above
        dS_up = np.linalg.norm(xi - S, axis=1)
        # no surface sample within 4 unit + cover, no E sample within 3 unit
        close_S = atlas.tree.query_ball_point(xi, 4 * unit * (1 - rt) + cover, return_length=True)
        close_E = E.tree.query_ball_point(xi, 3 * unit * (1 - rt), return_length=True)
        # E is within 6 unit: through the E point nearest to the foot, else exactly
        dE_up = np.linalg.norm(xi - E.points[foot_e], axis=1)
        far = np.flatnonzero(dE_up > 6 * unit * (1 + rt))
        if far.size:
            dE_up[far] = E.tree.query(xi[far])[0]
        dS_p, _ = atlas.tree.query(xi[probe])
        dE_p, _ = E.tree.query(xi[probe])
        res = {
            "dist_surface_max": float(dS_up[use].max()),
            "probe_dist_surface_min": float(dS_p.min()),
            "probe_dist_E_min": float(dE_p.min()),
            "probe_dist_E_max": float(dE_p.max()),
            "dist_E_upper_max": float(dE_up[use].max()),
        }
        checks = {
            "surface_lower": close_S == 0,
            "surface_upper": dS_up <= 5 * unit * (1 + rt),
            "E_lower": close_E == 0,
            "E_upper": dE_up <= 6 * unit * (1 + rt),
        }
        for k, ok in checks.items():
            bad = np.flatnonzero(use & ~ok)
            res[k + "_violations"] = int(bad.size)
            if bad.size and viol is None:
                viol = (j, k, int(bad[0]), xi[bad[0]].tolist())
        cert[f"sigma{j}"] = res
    cert["violations"] = sum(cert[f"sigma{j}"][k] for j in (1, 2) for k in cert[f"sigma{j}"] if k.endswith("_violations"))
    # local graph descriptions
    patches = {1: {}, 2: {}}
    a = atlas.a
    nnet = atlas.net.coords.shape[0]
    chosen = np.unique(np.linspace(0, nnet - 1, min(nnet, cfg.offset_patches)).astype(np.int64))
    failures = {1: 0, 2: 0}
    worst = 0.0
    checked = 0
    rad_t = 1.2 * a
    for p in chosen:
        H = atlas.patches.get(int(p))
        if H is None:
            continue
        n0 = oriented.signs[p] * _unit_normal(H.plane, _patch_gradient(H, np.zeros((1, H.d))))[0]
        try:
            T, tsgn = tangent_patch(H, rad_t, rad_t / 64, normal=n0)
        except ContractionFailure:
            failures[1] += 1
            failures[2] += 1
            continue
        own = np.flatnonzero(oriented.owner == p)
        for j, sgn in ((1, 1), (2, -1)):
            try:
                G = offset_graph(T, delta, sgn * tsgn, scale=r)
            except ContractionFailure:
                failures[j] += 1
                continue
            patches[j][int(p)] = G
            if G.radius <= 0 or own.size == 0:
                continue
            xi = sets[j][own]
            t = G.plane.tangential(xi)
            keep = (t ** 2).sum(1) <= (G.radius - 2 * G.pitch) ** 2
            if keep.any():
                dev = np.abs(G.plane.normal_coords(xi[keep])[:, 0] - G.evaluate(t[keep])[:, 0])
                dev = dev[np.isfinite(dev)]
                if dev.size:
                    worst = max(worst, float(dev.max()))
                    checked += int(dev.size)
    cert["offset_graph_patches"] = int(chosen.size)
    cert["offset_graph_failures"] = failures
    cert["offset_graph_identity_max"] = worst
    cert["offset_graph_identity_checked"] = checked
    sig = {}
    for j in (1, 2):
        sig[j] = replace(atlas, stage=f"offset_{j}", point_sample=sets[j], patches=patches[j],
                         certificates={}, extra={"delta": delta, "side": j})
        sig[j]._tree = None
    if check and viol is not None:
        j, k, i, w = viol
        raise SandwichViolated(f"offset {j} sample {i} fails the {k} bound", side=j, bound=k, witness=w, **{
            key: v for key, v in cert[f"sigma{j}"].items() if not key.endswith("_violations")})
    return OffsetPair(sig[1], sig[2], delta, cert)


# ---------------------------------------------------------------------------
# inner domains


@dataclass
class Domain:
    """Cells of one grid forming an inner domain."""

    grid: GridSpec
    mask: np.ndarray  # flat bool
    label: int

    @property
    def volume(self):
        return float(self.mask.sum()) * self.grid.h ** self.grid.n


@dataclass
class ScaleSurface:
    r: float
    smoothed: SurfaceAtlas
    eps: float
    sup: float  # max of the two proximity sups of the smoothed set

    def C0(self, eps):
        return self.sup / (eps * self.r) if eps > 0 else float("inf")


def scale_surface(E: PointCloud, r, cfg: DomainConfig | None = None) -> ScaleSurface:
    """Build and smooth at scale r (proximity certified, derivatives not)."""
    cfg = cfg or DomainConfig()
    Er = E.with_r0(r)
    atlas = build_surface(Er, config=cfg.build_config())
    sm = smooth_surface(atlas, cfg=cfg.smoothing_config(), certify=True, derivatives=False)
    c = sm.certificates
    return ScaleSurface(float(r), sm, float(sm.eps), float(max(c["smoothed_sup_E_to_S"], c["smoothed_sup_S_to_E"])))


@dataclass
class InnerDomains:
    W1: Domain
    W2: Domain
    report: dict
    oriented: OrientedAtlas
    offsets: OffsetPair

    def __iter__(self):
        return iter((self.W1, self.W2, self.report))


def _face_boundary(mask, shape):
    """Cells of ``mask`` with a face neighbour outside it (box faces excluded)."""
    m = mask.reshape(shape)
    edge = np.zeros_like(m)
    for ax in range(m.ndim):
        sl_a = [slice(None)] * m.ndim
        sl_b = [slice(None)] * m.ndim
        sl_a[ax] = slice(1, None)
        sl_b[ax] = slice(None, -1)
        diff = m[tuple(sl_a)] & ~m[tuple(sl_b)]
        edge[tuple(sl_a)] |= diff
        diff = m[tuple(sl_b)] & ~m[tuple(sl_a)]
        edge[tuple(sl_b)] |= diff
    return np.flatnonzero(edge.ravel())


def inner_domains(E: PointCloud, r, eps=None, C0=None, grid: GridSpec | None = None,
                  cfg: DomainConfig | None = None, surface: ScaleSurface | None = None,
                  check=True) -> InnerDomains:
    """Inner domains W_{r,1}, W_{r,2} with their zone certificates.

    ``eps`` and ``C0`` default to the values measured at scale r (C0 is
    floored at ``cfg.C0_floor``); ``grid`` defaults to the bounding grid with
    cell ``C0 eps r / grid_divisor``.

    Raises
    ------
    NotChainConnected
        E is not r0/20-connected.
    SideSelectionAmbiguous
        The surface sample meets several components of an offset complement,
        or more than one component avoids it.
    """
    cfg = cfg or DomainConfig()
    if E.d != E.n - 1:
        raise UnsupportedCodimension(f"need d = n - 1, got d={E.d}, n={E.n}")
    if not chain_connected(E, E.r0 / 20):
        raise NotChainConnected("sample is not r0/20-connected", rho=E.r0 / 20)
    surface = surface or scale_surface(E, r, cfg)
    eps = surface.eps if eps is None else float(eps)
    if C0 is None:
        C0 = max(cfg.C0_floor, surface.C0(eps))
    unit = C0 * eps * r
    if grid is None:
        grid = bounding_grid(E, unit / cfg.grid_divisor, max(cfg.box_margin * E.r0, cfg.box_units * unit))
    _check_budget(grid, cfg.max_cells)
    resolve = unit / 4
    sm = surface.smoothed
    oriented = orient(sm, cfg=cfg)
    pair = offset_surfaces(oriented, r, C0, eps, cfg, check=check)
    cover = surface_cover(sm)
    S = sm.point_sample
    report = {
        "r": float(r),
        "eps": eps,
        "C0": float(C0),
        "C0_measured": surface.C0(eps),
        "C2": 3 * float(C0),
        "unit": unit,
        "grid": grid.to_json(),
        "orientation": oriented.report,
        "offsets": pair.certificates,
    }
    # components of the complement of the central surface
    U = label_components(S, grid, grid.h + cover, resolve, "surface", cfg.max_cells)
    report["U_count"] = U.count
    doms = {}
    for j, sig in ((1, pair.sigma1), (2, pair.sigma2)):
        nrm = oriented.normals
        xi = sig.point_sample
        # spread of neighbouring offset samples beyond the surface cover
        pairs = sm.tree.query_pairs(2 * max(cover, sm.spacing), output_type="ndarray")
        spread = 0.0
        if pairs.size:
            disp = xi - S
            spread = 0.5 * float(np.linalg.norm(disp[pairs[:, 0]] - disp[pairs[:, 1]], axis=1).max())
        dil = grid.h + cover + spread
        L = label_components(xi, grid, dil, resolve, f"offset_{j}", cfg.max_cells)
        touched = L.label_at(S)
        touched = np.unique(touched[touched >= 0])
        others = np.setdiff1d(np.arange(L.count), touched)
        report[f"offset_{j}_labeling"] = {"count": L.count, "dilation": dil, "surface_labels": touched.tolist(),
                                          "volumes": L.volumes.tolist()}
        if touched.size != 1 or others.size != 1:
            raise SideSelectionAmbiguous(
                f"offset {j}: surface meets {touched.size} components, {others.size} others remain",
                side=j, surface_labels=touched.tolist(), count=L.count,
            )
        lab = int(others[0])
        doms[j] = Domain(grid, L.labels == lab, lab)
        del L
    W1, W2 = doms[1], doms[2]
    overlap = int((W1.mask & W2.mask).sum())
    report["disjoint"] = overlap == 0
    # each W inside one component of the complement of the surface, distinct
    uw = {}
    for j, W in ((1, W1), (2, W2)):
        present = np.zeros(U.count + 1, dtype=bool)
        present[U.labels[W.mask] + 1] = True
        uw[j] = (np.flatnonzero(present[1:])).tolist()
    report["W_in_U"] = uw
    report["W_in_distinct_U"] = len(uw[1]) == 1 and len(uw[2]) == 1 and uw[1] != uw[2]
    del U
    # zones
    inW = W1.mask | W2.mask
    # far cells (beyond 6 unit) must all lie in W
    outer = ~mark_near(grid, E.points, 6 * unit)
    outer &= ~inW
    n_outer = int(np.count_nonzero(outer))
    del outer
    near = mark_near(grid, E.points, 3 * unit * (1 - 1e-12))
    near &= inW
    n_inner = int(np.count_nonzero(near))
    del near, inW
    report["zone_far_cells_outside_W"] = n_outer
    report["zone_near_cells_in_W"] = n_inner
    report["zone_far_ok"] = n_outer == 0
    report["zone_near_ok"] = n_inner == 0
    slack = grid.h * math.sqrt(grid.n)
    band = {}
    for j, W in ((1, W1), (2, W2)):
        bd = _face_boundary(W.mask, grid.shape)
        dd, _ = E.tree.query(grid.centers(bd))
        lo_ok = dd >= 3 * unit - slack
        hi_ok = dd <= 6 * unit + slack
        band[j] = {
            "cells": int(bd.size),
            "dist_min": float(dd.min()) if dd.size else None,
            "dist_max": float(dd.max()) if dd.size else None,
            "violations": int((~(lo_ok & hi_ok)).sum()),
        }
    report["boundary_band"] = band
    report["boundary_band_ok"] = all(b["violations"] == 0 for b in band.values())
    report["volumes"] = {"W1": W1.volume, "W2": W2.volume}
    report["ok"] = bool(report["disjoint"] and report["W_in_distinct_U"] and report["zone_far_ok"]
                        and report["zone_near_ok"] and report["boundary_band_ok"]
                        and pair.certificates["violations"] == 0 and report["U_count"] == 2)
    return InnerDomains(W1, W2, report, oriented, pair)


# ---------------------------------------------------------------------------
# several scales


def _anchor_normal(oriented: OrientedAtlas, x0):
    _, i = oriented.atlas.tree.query(x0)
    return oriented.normals[i]


def multiscale_nesting(E: PointCloud, r, s, dom_r: InnerDomains | None = None, dom_s: InnerDomains | None = None,
                       cfg: DomainConfig | None = None, anchor=0):
    """Which pairing W_{r,i} inside W_{s,j} holds between two scales.

    Both constructions must share eps, C0 and aligned grids (the fine cell
    size divides the coarse one); when they are not given the pair is built
    with ``domain_ladder``.  Returns ``(pairing, report)`` with pairing
    ``"identity"`` (W_{r,1} in W_{s,1}) or ``"swap"``.

    Raises
    ------
    NestingViolated
        A coarse cell of some W_{r,i} is not covered by W_{s,pi(i)}.
    """
    if not 3 * s <= r * (1 + 1e-12):
        raise InputError(f"need 3 s <= r, got r={r}, s={s}")
    cfg = cfg or DomainConfig()
    if dom_r is None or dom_s is None:
        lad = domain_ladder(E, [r, s], cfg)
        dom_r, dom_s = lad["domains"]
    gr, gs = dom_r.W1.grid, dom_s.W1.grid
    ratio = gr.h / gs.h
    k = int(round(ratio))
    if abs(ratio - k) > 1e-9 * ratio or tuple(x * k for x in gr.shape) != gs.shape or not np.allclose(gr.lo, gs.lo):
        raise InputError("scale grids are not nested")
    x0 = E.points[anchor]
    rep_r, rep_s = dom_r.report, dom_s.report
    Pr = pca_plane(E, x0, r)
    Ps = pca_plane(E, x0, s)
    pdist = plane_plane_distance(Pr, Ps, x0, 1e-3 * r)
    en = _anchor_normal(dom_r.oriented, x0)
    unit = rep_r["unit"]
    z_plus = x0 + cfg.anchor_factor * unit * en
    z_minus = x0 - cfg.anchor_factor * unit * en
    cells = {}
    for name, z in (("plus", z_plus), ("minus", z_minus)):
        fr, fs = gr.locate(z)[0], gs.locate(z)[0]
        cells[name] = {
            "r": 1 if fr >= 0 and dom_r.W1.mask[fr] else 2 if fr >= 0 and dom_r.W2.mask[fr] else 0,
            "s": 1 if fs >= 0 and dom_s.W1.mask[fs] else 2 if fs >= 0 and dom_s.W2.mask[fs] else 0,
        }
    if gr.locate(z_plus)[0] < 0 or gs.locate(z_plus)[0] < 0:
        raise InputError("anchor point lies outside the grid; enlarge box_units", anchor=z_plus.tolist())
    if cells["plus"]["r"] == 0 or cells["plus"]["s"] == 0:
        raise NestingViolated("anchor point outside the inner domains", anchor=z_plus.tolist(), cells=cells)
    same = cells["plus"]["r"] == cells["plus"]["s"]
    pairing = "identity" if same else "swap"
    target = {1: 1, 2: 2} if same else {1: 2, 2: 1}
    fine = {1: dom_s.W1.mask.reshape(gs.shape), 2: dom_s.W2.mask.reshape(gs.shape)}
    n = gr.n
    for i, Wr in ((1, dom_r.W1), (2, dom_r.W2)):
        f = fine[target[i]]
        shp = []
        for c in gr.shape:
            shp.extend([c, k])
        covered = f.reshape(shp).all(axis=tuple(range(1, 2 * n, 2))).ravel()
        bad = np.flatnonzero(Wr.mask & ~covered)
        if bad.size:
            raise NestingViolated(
                f"W_(r,{i}) is not inside W_(s,{target[i]})",
                witness=gr.centers(bad[:1])[0].tolist(),
                cells=int(bad.size),
                pairing=pairing,
            )
    report = {
        "r": float(r),
        "s": float(s),
        "anchor": x0.tolist(),
        "plane_distance": float(pdist),
        "plane_distance_over_eps": float(pdist / rep_r["eps"]) if rep_r["eps"] > 0 else None,
        "anchor_cells": cells,
        "pairing": pairing,
    }
    return pairing, report


def _compose(p, q):
    return "identity" if p == q else "swap"


def ladder_scales(r0, r_min):
    out = []
    r = float(r0)
    while r >= r_min * (1 - 1e-9):
        out.append(r)
        r /= 3.0
    return out


def domain_ladder(E: PointCloud, scales, cfg: DomainConfig | None = None, surfaces=None, refine=1, check=True):
    """Inner domains at several scales with shared eps, C0 and nested grids.

    eps is the largest measured value over the scales and C0 the largest
    measured proximity constant relative to it (at least ``C0_floor``).  The
    coarsest grid has cell ``C0 eps r_0 / grid_divisor / refine``; finer
    scales divide it by the integer ratio of consecutive radii rounded up.
    """
    cfg = cfg or DomainConfig()
    scales = [float(x) for x in scales]
    if surfaces is None:
        surfaces = [scale_surface(E, r, cfg) for r in scales]
    eps = max(sf.eps for sf in surfaces)
    C0 = max([cfg.C0_floor] + [sf.C0(eps) for sf in surfaces])
    h0 = C0 * eps * scales[0] / cfg.grid_divisor / refine
    margin = max(cfg.box_margin * E.r0, cfg.box_units * C0 * eps * scales[0])
    grid = bounding_grid(E, h0, margin)
    grids = [grid]
    for a, b in zip(scales[:-1], scales[1:]):
        grids.append(grids[-1].refined(int(math.ceil(a / b - 1e-9))))
    for g in grids:
        _check_budget(g, cfg.max_cells)
    doms = [inner_domains(E, r, eps, C0, g, cfg, sf, check=check) for r, g, sf in zip(scales, grids, surfaces)]
    return {"eps": eps, "C0": C0, "scales": scales, "grids": grids, "domains": doms, "surfaces": surfaces}


def certify_two_components(E: PointCloud, r_min, cfg: DomainConfig | None = None, halve=True, surfaces=None):
    """Two complementary components of E and consistent nesting down to r_min.

    The complement of the E-neighbourhood is labeled first on a grid with
    cell ``r_min / e_grid_divisor``; exactly two components are required.
    Then the inner domains of every ladder scale ``r0 3^-k >= r_min`` must
    fall in distinct components, consecutive scales must nest, and pairings
    must compose.  With ``halve`` the whole check is repeated at half cell
    size and counts and pairings compared.

    Raises
    ------
    ComponentCountMismatch
        The E complement does not have exactly two components.
    """
    cfg = cfg or DomainConfig()
    scales = ladder_scales(E.r0, r_min)
    report = {"scales": scales, "config": cfg.to_json()}
    passes = [1, 2] if halve else [1]
    ecounts = {}
    labelings = {}
    for f in passes:
        g = bounding_grid(E, r_min / cfg.e_grid_divisor / f, cfg.box_margin * E.r0)
        L = label_components(E.points, g, g.h + E.sample_gap, None, "E", cfg.max_cells)
        ecounts[f] = L.count
        labelings[f] = L
        if L.count != 2:
            raise ComponentCountMismatch(
                f"complement of the sample neighbourhood has {L.count} components",
                count=L.count, h=g.h, volumes=L.volumes.tolist(),
            )
    report["E_components"] = ecounts
    if surfaces is None:
        surfaces = [scale_surface(E, r, cfg) for r in scales]
    runs = {}
    for f in passes:
        lad = domain_ladder(E, scales, cfg, surfaces=surfaces, refine=f)
        L = labelings[f]
        per_scale = []
        for r, dom in zip(scales, lad["domains"]):
            labs = {}
            for j, W in ((1, dom.W1), (2, dom.W2)):
                labs[j] = L.labels_met(W.grid, W.mask)
            distinct = len(labs[1]) == 1 and len(labs[2]) == 1 and labs[1] != labs[2]
            per_scale.append({"r": r, "E_labels": labs, "distinct": distinct, "domain_ok": dom.report["ok"],
                              "U_count": dom.report["U_count"],
                              "offset_counts": [dom.report["offset_1_labeling"]["count"],
                                                dom.report["offset_2_labeling"]["count"]]})
            if not distinct:
                raise ComponentCountMismatch(f"inner domains at r={r:.4g} do not split across the two components",
                                             r=r, labels=labs)
        pairings = []
        for i in range(len(scales) - 1):
            p, rep = multiscale_nesting(E, scales[i], scales[i + 1], lad["domains"][i], lad["domains"][i + 1], cfg)
            pairings.append(rep)
        composed = []
        for i in range(len(scales) - 2):
            p, rep = multiscale_nesting(E, scales[i], scales[i + 2], lad["domains"][i], lad["domains"][i + 2], cfg)
            expect = _compose(pairings[i]["pairing"], pairings[i + 1]["pairing"])
            composed.append({"r": scales[i], "s": scales[i + 2], "direct": p, "composed": expect, "ok": p == expect})
            if p != expect:
                raise NestingViolated("pairings do not compose", r=scales[i], s=scales[i + 2], direct=p, composed=expect)
        runs[f] = {
            "eps": lad["eps"],
            "C0": lad["C0"],
            "h": [g.h for g in lad["grids"]],
            "scales": per_scale,
            "pairings": [p["pairing"] for p in pairings],
            "nesting": pairings,
            "composition": composed,
            "all_domains_ok": all(s["domain_ok"] for s in per_scale),
        }
        del lad
    report["runs"] = {str(k): v for k, v in runs.items()}
    if halve:
        a, b = runs[1], runs[2]
        same_counts = ([s["offset_counts"] for s in a["scales"]] == [s["offset_counts"] for s in b["scales"]]
                       and [s["U_count"] for s in a["scales"]] == [s["U_count"] for s in b["scales"]]
                       and ecounts[1] == ecounts[2])
        report["halving_stable"] = bool(same_counts and a["pairings"] == b["pairings"])
    report["ok"] = bool(all(r["all_domains_ok"] for r in runs.values()) and report.get("halving_stable", True))
    return report
