"""Mollification of the glued set ball by ball, with annulus blending.

Balls B(x, 3a/2) are processed color by color.  Inside a ball the current
set is read as a graph over P_x, convolved with a compact bump and blended
back with a smooth radial cutoff, so nothing changes outside the ball.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DerivativeBudgetExceeded, GridTooCoarse, PatchMismatch
from .oracle import finite_diff_bounds
from .surface import Deadline, GraphPatch, SurfaceAtlas, _grid_nodes, patch_grid


@dataclass
class SmoothingConfig:
    """Lengths are fractions of the net scale a."""

    kernel_width: float = 0.1
    blend_inner: float = 1.3
    blend_outer: float = 1.5
    k_max: int = 3
    kernel_order: int = 5  # classical smoothness of the bump (1 - |t|^2)^(order + 1)
    grid_factor: int = 16  # pitch = kernel_width / grid_factor
    fd_divisor: int = 32  # derivative certificates use pitch kernel_width / fd_divisor
    interp_order: int = 5
    cert_radius: float = 1.0
    lambda_budget: float = 1e6
    fixed_point_tol: float = 1e-13
    max_iter: int = 50
    max_seconds: float | None = None

    def validate(self):
        if not (0 < self.kernel_width < self.blend_inner < self.blend_outer):
            raise ValueError("need 0 < kernel_width < blend_inner < blend_outer")
        if abs(self.blend_outer - 1.5) > 1e-12:
            raise ValueError("blend_outer must be 3/2 (balls B(x, 3a/2))")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.kernel_order < self.k_max + 2:
            raise ValueError("kernel_order must be at least k_max + 2")
        if self.grid_factor < 8:
            raise ValueError("grid_factor below 8 leaves the kernel under-resolved")
        return self

    def to_json(self):
        return asdict(self)


def bump_weights(d, width, pitch, order=5):
    """Discrete radial bump (1 - |t/width|^2)^(order+1) on the grid, summing
    to one.  Symmetric, so affine data is reproduced exactly."""
    m = int(math.floor(width / pitch))
    ax = np.arange(-m, m + 1) * pitch
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    r2 = sum(g * g for g in mesh) / (width * width)
    w = np.where(r2 < 1, np.clip(1 - r2, 0, None) ** (order + 1), 0.0)
    return w / w.sum()


def smoothstep(r, inner, outer):
    """C-infinity radial cutoff: 1 for r <= inner, 0 for r >= outer."""
    s = np.clip((outer - np.asarray(r, dtype=float)) / (outer - inner), 0.0, 1.0)

    def g(t):
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = np.exp(-1.0 / t[pos])
        return out

    num = g(s)
    return num / (num + g(1 - s))


def mollify_grid(values, pitch, width, order=5):
    """Convolve each component of a gridded map with the bump."""
    d = values.ndim - 1
    kern = bump_weights(d, width, pitch, order)
    out = np.empty_like(values)
    for i in range(values.shape[-1]):
        out[..., i] = ndimage.convolve(values[..., i], kern, mode="nearest")
    return out


def mollify_patch(patch: GraphPatch, cfg: SmoothingConfig | None = None, a=None, width=None) -> GraphPatch:
    """Convolution of the patch with the bump of width ``width`` (or
    ``cfg.kernel_width * a``); the result is valid on the disk shrunk by the
    width.

    Raises
    ------
    GridTooCoarse
        Grid pitch above width / 8.
    """
    cfg = cfg or SmoothingConfig()
    if width is None:
        if a is None:
            raise ValueError("give either width or a")
        width = cfg.kernel_width * a
    if patch.pitch > width / 8 * (1 + 1e-12):
        raise GridTooCoarse(f"pitch {patch.pitch:.3g} exceeds width/8 = {width / 8:.3g}",
                            pitch=patch.pitch, width=width)
    vals = mollify_grid(patch.values, patch.pitch, width, cfg.kernel_order)
    out = GraphPatch(patch.plane, patch.radius - width, patch.pitch, patch.half, patch.lipschitz_bound,
                     None, vals, cfg.interp_order, dict(patch.meta, mollified=float(width)))
    out.meta["grid_lipschitz"] = out.grid_lipschitz()
    return out


def blend_patch(old: GraphPatch, new: GraphPatch, cfg: SmoothingConfig | None = None, center=None, a=1.0) -> GraphPatch:
    """chi * new + (1 - chi) * old with chi radial about ``center``.

    ``blend_inner`` and ``blend_outer`` are scaled by ``a``.  Nodes with
    chi = 1 take ``new`` and nodes with chi = 0 keep ``old`` exactly.
    """
    cfg = cfg or SmoothingConfig()
    if old.values.shape != new.values.shape or abs(old.pitch - new.pitch) > 1e-15 * max(old.pitch, 1.0):
        raise PatchMismatch("patches have different grids")
    if not (np.allclose(old.plane.base, new.plane.base, rtol=0, atol=1e-12 * max(1.0, np.abs(old.plane.base).max()))
            and np.allclose(old.plane.frame, new.plane.frame, rtol=0, atol=1e-12)):
        raise PatchMismatch("patches live on different planes")
    nodes = old.nodes()
    c = np.zeros(old.d) if center is None else old.plane.tangential(center)
    r = np.linalg.norm(nodes - c, axis=1)
    chi = smoothstep(r, cfg.blend_inner * a, cfg.blend_outer * a).reshape(old.values.shape[:-1] + (1,))
    mixed = chi * new.values + (1 - chi) * old.values
    vals = np.where(chi >= 1, new.values, np.where(chi > 0, mixed, old.values))
    return GraphPatch(old.plane, old.radius, old.pitch, old.half, max(old.lipschitz_bound, new.lipschitz_bound),
                      None, vals, cfg.interp_order, dict(old.meta, blended=True))


class _Evaluator:
    """Evaluates the current set T_c as a graph over a given net plane.

    T_0 near x is the graph of the stage patch of x.  A smoothed ball x'
    replaces T inside the cylinder over its 3a/2 disk; later colors win.
    """

    def __init__(self, atlas: SurfaceAtlas, cfg: SmoothingConfig):
        self.atlas = atlas
        self.cfg = cfg
        self.a = atlas.a
        self.colors = atlas.net.colors
        self.coords = atlas.net.coords
        self.tree = cKDTree(self.coords)
        self.smoothed = {}
        self.iterations = 0

    def _solve(self, P, Q, H, u, start):
        """Tangential coords v over Q with pi_P(graph_H(v)) = u."""
        M = P.frame @ Q.frame.T
        Minv = np.linalg.inv(M)
        v = start.copy()
        # the requested tolerance can sit below float resolution of the coordinates
        scale = 1.0 + np.abs(P.base).max() + np.abs(Q.base).max()
        tol = max(self.cfg.fixed_point_tol * self.a, 16 * np.finfo(float).eps * scale)
        for it in range(self.cfg.max_iter):
            p = Q.embed(v, H.interpolate(v))
            step = (u - P.tangential(p)) @ Minv.T
            v = v + step
            if np.abs(step).max() <= tol:
                break
        self.iterations = max(self.iterations, it + 1)
        return Q.embed(v, H.interpolate(v))

    def points(self, pos, u, upto):
        """Points of T_upto over the plane of net position ``pos`` at tangential coords u."""
        atlas = self.atlas
        P = atlas.planes[pos]
        base = atlas.patches[pos]
        p = P.embed(u, base.evaluate(u))
        reach = np.sqrt((u ** 2).sum(1)).max() + 2 * self.cfg.blend_outer * self.a + self.a
        near = [q for q in self.tree.query_ball_point(self.coords[pos], reach)
                if q in self.smoothed and self.colors[q] <= upto]
        near.sort(key=lambda q: (self.colors[q], q))
        R = self.cfg.blend_outer * self.a
        for q in near:
            H = self.smoothed[q]
            Q = H.plane
            tq = Q.tangential(p)
            mask = (tq ** 2).sum(1) < R * R
            if not mask.any():
                continue
            p[mask] = self._solve(P, Q, H, u[mask], tq[mask])
        return p

    def owner(self, y, upto):
        """Latest-color smoothed ball whose 3a/2 cylinder contains each y (-1: none)."""
        return self.owners(y, upto)[0]

    def owners(self, y, upto):
        """Owner and runner-up ball for each row of y (-1 where absent).

        The owner is the containing ball of highest color (lowest index on
        ties); the runner-up is the next one in that order.
        """
        y = np.atleast_2d(np.asarray(y, dtype=float))
        R = self.cfg.blend_outer * self.a
        m = y.shape[0]
        first = np.full(m, -1, dtype=np.int64)
        second = np.full(m, -1, dtype=np.int64)
        if m == 0 or not self.smoothed:
            return first, second
        nnet = self.coords.shape[0]
        k = min(nnet, 8 if self.atlas.E.d == 1 else 64)
        dist, idx = self.tree.query(y, k=k, distance_upper_bound=2 * R)
        dist = dist.reshape(m, k)
        idx = idx.reshape(m, k)
        if k < nnet and np.isfinite(dist[:, -1]).any():
            dist, idx = self.tree.query(y, k=nnet if nnet < 4096 else 4 * k, distance_upper_bound=2 * R)
            dist = dist.reshape(m, -1)
            idx = idx.reshape(m, -1)
        ok = np.isfinite(dist)
        q = np.where(ok, idx, 0)
        if not hasattr(self, "_frames") or self._frames.shape[0] != nnet:
            self._frames = np.stack([P.frame for P in self.atlas.planes])
            self._done = np.zeros(nnet, dtype=bool)
        self._done[:] = False
        self._done[list(self.smoothed)] = True
        col = self.colors[q]
        ok &= self._done[q] & (col <= upto)
        rel = y[:, None, :] - self.coords[q]
        t = np.einsum("mkn,mkdn->mkd", rel, self._frames[q])
        ok &= (t ** 2).sum(-1) < R * R
        # rank: color descending, index ascending
        key = np.where(ok, col.astype(np.float64) * (nnet + 1) - q, -np.inf)
        order = np.argsort(-key, axis=1, kind="stable")
        top = np.take_along_axis(key, order[:, :2] if key.shape[1] > 1 else order[:, :1], axis=1)
        pick = np.take_along_axis(q, order[:, :top.shape[1]], axis=1)
        first = np.where(np.isfinite(top[:, 0]), pick[:, 0], -1)
        if top.shape[1] > 1:
            second = np.where(np.isfinite(top[:, 1]), pick[:, 1], -1)
        return first, second


def smooth_surface(atlas: SurfaceAtlas, colored=None, cfg: SmoothingConfig | None = None, certify=True,
                   derivatives=True, deadline: Deadline | None = None) -> SurfaceAtlas:
    """Mollify and blend in every ball B(x, 3a/2), color by color.

    Returns a new atlas with ``stage="smoothed"`` whose patches are the
    smoothed ball patches and whose sample is the old sample pushed onto the
    smoothed set.

    Raises
    ------
    DerivativeBudgetExceeded
        Some derivative estimate is non-finite or above ``lambda_budget``.
    ResourceLimitExceeded
        ``deadline`` (default: ``cfg.max_seconds``) ran out.
    """
    cfg = (cfg or SmoothingConfig()).validate()
    deadline = deadline or Deadline(cfg.max_seconds)
    net = colored if colored is not None else atlas.net
    a = atlas.a
    width = cfg.kernel_width * a
    R = cfg.blend_outer * a + width
    half, pitch = patch_grid(R, width / cfg.grid_factor)
    nodes = _grid_nodes(atlas.E.d, half, pitch)
    shape = (2 * half + 1,) * atlas.E.d + (atlas.E.n - atlas.E.d,)
    ev = _Evaluator(atlas, cfg)
    for j in range(1, net.N + 1):
        done = {}
        for k, pos in enumerate(net.members(j)):
            if k % 8 == 0:
                deadline.check(f"smoothing color {j}")
            P = atlas.planes[pos]
            p = ev.points(pos, nodes, j - 1)
            old = GraphPatch(P, R, pitch, half, atlas.patches[pos].lipschitz_bound, None,
                             P.normal_coords(p).reshape(shape), cfg.interp_order)
            new = mollify_patch(old, cfg, width=width)
            H = blend_patch(old, new, cfg, P.base, a)
            H.meta.update(color=int(j), moved=float(np.abs(H.values - old.values).max()))
            done[int(pos)] = H
        ev.smoothed.update(done)
    out = replace(atlas, stage="smoothed", patches=dict(ev.smoothed), certificates=dict(atlas.certificates),
                  extra=dict(atlas.extra, smoothing=cfg.to_json(), smooth_pitch=pitch, smooth_half=half))
    out._tree = None
    # push the old sample onto the smoothed set
    S = atlas.point_sample
    own = ev.owner(S, net.N)
    newS = S.copy()
    for q in np.unique(own[own >= 0]):
        sel = np.flatnonzero(own == q)
        u = atlas.planes[q].tangential(S[sel])
        newS[sel] = ev.points(int(q), u, net.N)
    out.point_sample = newS
    out.extra["evaluator"] = ev
    out.extra["fixed_point_iterations"] = ev.iterations
    if certify:
        deadline.check("smoothing certification")
        certify_smoothed(out, atlas, cfg, derivatives=derivatives, deadline=deadline)
    return out


def evaluate_smoothed(smoothed: SurfaceAtlas, pos, u):
    """Points of the smoothed set over the plane of net position ``pos``."""
    ev = smoothed.extra["evaluator"]
    return ev.points(int(pos), np.atleast_2d(np.asarray(u, dtype=float)), smoothed.net.N)


def derivative_grid(smoothed: SurfaceAtlas, pos, radius, pitch):
    """Normal coordinates of the smoothed set over P_x on a square grid."""
    atlas = smoothed
    d = atlas.E.d
    half, pitch = patch_grid(radius, pitch)
    nodes = _grid_nodes(d, half, pitch)
    P = atlas.planes[pos]
    vals = P.normal_coords(evaluate_smoothed(atlas, pos, nodes))
    vals = vals.reshape((2 * half + 1,) * d + (atlas.E.n - d,))
    mask = ((nodes ** 2).sum(1) <= radius * radius).reshape(vals.shape[:-1])
    vals = np.where(mask[..., None], vals, np.nan)
    return GraphPatch(P, radius, pitch, half, 0.0, None, vals)


def certify_smoothed(smoothed: SurfaceAtlas, stage_atlas: SurfaceAtlas, cfg: SmoothingConfig, derivatives=True,
                     deadline: Deadline | None = None):
    """Proximity to E, moved distance and (optionally) derivative bounds up to k_max."""
    E = smoothed.E
    a = smoothed.a
    eps, r0 = smoothed.eps, smoothed.r0
    S_old = stage_atlas.point_sample
    S_new = smoothed.point_sample
    moved = float(np.linalg.norm(S_new - S_old, axis=1).max())
    dist_SE, near = E.tree.query(S_new)
    use = np.ones(S_new.shape[0], dtype=bool) if E.interior is None else E.interior[near]
    sup_SE = float(dist_SE[use].max()) if use.any() else 0.0
    # E to the smoothed set: vertical distance over the owning ball
    ev = smoothed.extra["evaluator"]
    pts = E.points[E.center_indices()]
    d_samp, _ = cKDTree(S_new).query(pts)
    own = ev.owner(pts, smoothed.net.N)
    d_graph = np.full(pts.shape[0], np.inf)
    for q in np.unique(own[own >= 0]):
        sel = np.flatnonzero(own == q)
        P = smoothed.planes[q]
        t = P.tangential(pts[sel])
        d_graph[sel] = np.linalg.norm(pts[sel] - ev.points(int(q), t, smoothed.net.N), axis=1)
    sup_ES = float(np.minimum(d_samp, d_graph).max())
    scale = eps * r0
    C0_stage = stage_atlas.certificates.get("C0", float("nan"))
    C0s = max(sup_ES, sup_SE) / scale if scale > 0 else float("inf")
    cert = {
        "smoothed_sup_E_to_S": sup_ES,
        "smoothed_sup_S_to_E": sup_SE,
        "smoothed_C0": C0s,
        "smoothed_C0_within_2C0": bool(C0s <= 2 * C0_stage) if np.isfinite(C0_stage) else None,
        "moved": moved,
        "moved_over_eps_r0": moved / scale if scale > 0 else float("inf"),
        "fixed_point_iterations": smoothed.extra.get("fixed_point_iterations"),
    }
    smoothed.certificates.update(cert)
    if not derivatives:
        return cert
    # derivatives
    width = cfg.kernel_width * a
    fd_pitch = width / cfg.fd_divisor
    rad = cfg.cert_radius * a
    kmax = cfg.k_max
    sup = np.zeros(kmax + 1)
    coarse = np.zeros(kmax + 1)
    where = [None] * (kmax + 1)
    unstable = [0] * (kmax + 1)
    gaps = np.zeros(kmax + 1)
    for pos in range(len(smoothed.net.points)):
        if deadline is not None and pos % 8 == 0:
            deadline.check("derivative certificates")
        g = derivative_grid(smoothed, pos, rad, fd_pitch)
        for k in range(1, kmax + 1):
            rep = finite_diff_bounds(g, k)
            if not np.isfinite(rep.value):
                raise DerivativeBudgetExceeded("non-finite derivative estimate", k=k, x=g.plane.base.tolist())
            if rep.value > sup[k]:
                sup[k], where[k] = rep.value, pos
            coarse[k] = max(coarse[k], rep.extra["coarse"])
            gaps[k] = max(gaps[k], rep.extra["richardson_gap"])
            if not rep.extra["stable"]:
                unstable[k] += 1
    lam = {}
    for k in range(1, kmax + 1):
        lam[k] = sup[k] * r0 ** (k - 1) / eps if eps > 0 else float("inf")
        if not np.isfinite(lam[k]) or lam[k] > cfg.lambda_budget:
            raise DerivativeBudgetExceeded(
                f"order-{k} derivative constant {lam[k]:.4g} over budget",
                k=k,
                value=float(sup[k]),
                x=smoothed.net.coords[where[k]].tolist() if where[k] is not None else None,
            )
    glob_fine = {k: float(sup[k]) for k in range(1, kmax + 1)}
    glob_coarse = {k: float(coarse[k]) for k in range(1, kmax + 1)}
    rich = {k: abs(glob_fine[k] - glob_coarse[k]) / max(glob_fine[k], glob_coarse[k], 1e-300)
            for k in range(1, kmax + 1)}
    cert.update({
        "derivative_sup": glob_fine,
        "derivative_sup_coarse": glob_coarse,
        "Lambda": lam,
        "richardson_gap": rich,
        "richardson_gap_local_max": {k: float(gaps[k]) for k in range(1, kmax + 1)},
        "richardson_unstable_balls": {k: unstable[k] for k in range(1, kmax + 1)},
        "fd_pitch": fd_pitch,
    })
    smoothed.certificates.update(cert)
    return cert
