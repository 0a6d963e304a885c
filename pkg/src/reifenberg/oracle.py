"""Exhaustive reference computations used to check the fast paths."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import _kernels as K
from .errors import EmptyBall, EmptySet, GridTooCoarse
from .geometry import AffinePlane, PointCloud, default_pitch, disk_grid, local_hausdorff_set_plane


@dataclass
class OracleReport:
    quantity: str
    value: float
    witness: list = field(default_factory=list)
    method: str = ""
    cost: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "quantity": self.quantity,
            "value": self.value,
            "witness": [np.asarray(w).tolist() for w in self.witness],
            "method": self.method,
            "cost": self.cost,
            **{k: v for k, v in self.extra.items() if np.isscalar(v)},
        }


def directed_hausdorff(A, B):
    """sup over a in A of dist(a, B), by exhaustive scan; returns (value, i, j)."""
    A = np.ascontiguousarray(np.atleast_2d(np.asarray(A, dtype=float)))
    B = np.ascontiguousarray(np.atleast_2d(np.asarray(B, dtype=float)))
    if A.size == 0 or B.size == 0:
        raise EmptySet("both point sets must be non-empty")
    dist, arg = K.nearest_dist_brute(A, B)
    i = int(np.argmax(dist))
    return float(dist[i]), i, int(arg[i])


def hausdorff_bilateral(A, B) -> OracleReport:
    """Max of the two one-sided sups over all pairs."""
    ab, i1, j1 = directed_hausdorff(A, B)
    ba, i2, j2 = directed_hausdorff(B, A)
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if ab >= ba:
        wit = [A[i1], B[j1]]
    else:
        wit = [B[i2], A[j2]]
    return OracleReport(
        "hausdorff",
        max(ab, ba),
        wit,
        "exhaustive pair scan",
        2 * A.shape[0] * B.shape[0],
        {"a_to_b": ab, "b_to_a": ba},
    )


def _line(x, phi):
    return AffinePlane(x, [[np.cos(phi), np.sin(phi)]])


def gamma_sweep_2d(E: PointCloud, x, r, n_angles=10000, polish=8) -> OracleReport:
    """Minimize the normalized set/line distance over lines through x.

    All ``n_angles`` directions in [0, pi) are considered.  The set-to-line
    side is computed for every angle at once; the line-to-set side is
    evaluated in increasing order of the first side with exact early exits
    (branch and bound), so the grid minimum is exact.  The ``polish`` best
    grid angles are then refined by a bounded scalar search inside their
    grid cell, which removes the angular resolution error.
    """
    if E.n != 2:
        raise ValueError("gamma_sweep_2d needs n = 2")
    x = np.asarray(x, dtype=float)
    idx = E.tree.query_ball_point(x, r)
    if not idx:
        raise EmptyBall("no samples in the ball", x=x.tolist(), r=r)
    pitch = default_pitch(E.sample_gap, r)
    rel = E.points[idx] - x
    phis = np.arange(n_angles) * (np.pi / n_angles)
    c, s = np.cos(phis), np.sin(phis)
    s1 = np.empty(n_angles)
    for a in range(0, n_angles, 1024):
        s1[a:a + 1024] = np.abs(rel[:, 0][None, :] * s[a:a + 1024, None] - rel[:, 1][None, :] * c[a:a + 1024, None]).max(1)
    s1 = s1 / r
    t = disk_grid(1, r, pitch)[:, 0]
    t = t[np.argsort(-np.abs(t), kind="stable")]
    values = np.full(n_angles, np.inf)
    best = np.inf
    evaluated = 0
    for k in np.argsort(s1, kind="stable"):
        if s1[k] >= best:
            break
        line = x + t[:, None] * np.array([c[k], s[k]])
        cur = 0.0
        aborted = False
        for a in range(0, t.size, 64):
            dist, _ = E.tree.query(line[a:a + 64])
            cur = max(cur, float(dist.max()) / r)
            evaluated += min(64, t.size - a)
            if s1[k] + cur >= best:
                aborted = True
                break
        if not aborted:
            values[k] = s1[k] + cur
            best = values[k]
    kbest = int(np.argmin(values))
    value, phi = float(values[kbest]), float(phis[kbest])
    cand = np.argsort(values)[:polish]
    cand = cand[np.isfinite(values[cand])]
    step = np.pi / n_angles  # the minimizer is within one grid step of a grid angle
    for k in cand:
        # optimize the offset from the grid angle: the bounded search has a
        # relative x-tolerance, so small arguments keep it tight
        center, width = float(phis[k]), step
        for _ in range(3):
            res = minimize_scalar(
                lambda u: local_hausdorff_set_plane(E, _line(x, center + u), x, r, pitch),
                bounds=(-width, width),
                method="bounded",
                options={"xatol": 1e-16, "maxiter": 2000},
            )
            center, width = center + float(res.x), width * 1e-4
        if res.fun < value:
            value, phi = float(res.fun), center
    exact = local_hausdorff_set_plane(E, _line(x, phi), x, r, pitch)
    return OracleReport(
        "gamma",
        exact,
        [x, np.array([np.cos(phi), np.sin(phi)])],
        "angle sweep with branch-and-bound and in-cell polish",
        int(n_angles * len(idx) + evaluated),
        {"angle": phi, "grid_min": float(values[kbest]), "grid_angle": float(phis[kbest])},
    )


def lipschitz_pairs(tang, norm, tiny=1e-12) -> OracleReport:
    """Largest |dF|/|dw| over all pairs with separated tangential parts."""
    tang = np.atleast_2d(np.asarray(tang, dtype=float))
    norm = np.atleast_2d(np.asarray(norm, dtype=float))
    if tang.shape[0] == 1 and tang.shape[1] != 1 and norm.shape[0] != 1:
        tang = tang.T
    k = tang.shape[0]
    best, wit = 0.0, []
    for i in range(k - 1):
        dt = np.linalg.norm(tang[i + 1:] - tang[i], axis=1)
        dn = np.linalg.norm(norm[i + 1:] - norm[i], axis=1)
        ok = dt >= tiny
        if ok.any():
            ratio = np.where(ok, dn / np.where(ok, dt, 1.0), 0.0)
            j = int(np.argmax(ratio))
            if ratio[j] > best:
                best, wit = float(ratio[j]), [i, i + 1 + j]
    return OracleReport("lipschitz", best, wit, "exhaustive pair scan", k * (k - 1) // 2)


def central_stencil(k):
    """Second-order accurate central stencil for the k-th derivative (unit step)."""
    m = (k + 1) // 2 if k % 2 else k // 2
    m = max(m, 1)
    offs = np.arange(-m, m + 1)
    vand = np.vander(offs, 2 * m + 1, increasing=True).T.astype(float)
    rhs = np.zeros(2 * m + 1)
    rhs[k] = float(np.prod(np.arange(1, k + 1)))
    return offs, np.linalg.solve(vand, rhs)


def _directions(d):
    dirs = [tuple(int(i == j) for j in range(d)) for i in range(d)]
    if d == 2:
        dirs += [(1, 1), (1, -1)]
    return dirs


def directional_fd(values, pitch, k, step=1):
    """k-th central differences of gridded ``values`` along axis and diagonal
    directions, using grid step ``step``.  Returns the max absolute value
    (NaN entries and stencils leaving the grid are skipped)."""
    vals = np.asarray(values, dtype=float)
    d = vals.ndim - 1
    offs, coef = central_stencil(k)
    m = int(offs.max()) * step
    best = 0.0
    for e in _directions(d):
        e = np.array(e)
        h = pitch * step * np.linalg.norm(e)
        lo = [m * abs(v) for v in e]
        hi = [vals.shape[a] - m * abs(e[a]) for a in range(d)]
        if any(hh <= ll for ll, hh in zip(lo, hi)):
            continue
        acc = 0.0
        for o, cf in zip(offs, coef):
            sl = tuple(slice(lo[a] + o * step * e[a], hi[a] + o * step * e[a]) for a in range(d))
            acc = acc + cf * vals[sl]
        acc = np.abs(acc) / h ** k
        if np.isfinite(acc).any():
            best = max(best, float(np.nanmax(acc)))
    return best


def finite_diff_bounds(patch, k, rtol=0.1) -> OracleReport:
    """Sup of k-th order central differences of a gridded patch with a
    Richardson check against the same estimate at twice the pitch."""
    offs, _ = central_stencil(k)
    need = 2 * (2 * int(offs.max()) * 2 + 1)
    vals = np.asarray(patch.values, dtype=float)
    if min(vals.shape[:-1]) < need:
        raise GridTooCoarse(f"grid too small for order-{k} differences", k=k)
    fine = directional_fd(vals, patch.pitch, k, 1)
    coarse = directional_fd(vals, patch.pitch, k, 2)
    scale = float(np.nanmax(np.abs(vals))) if np.isfinite(vals).any() else 0.0
    floor = 1e4 * np.finfo(float).eps * max(scale, patch.pitch) / patch.pitch ** k
    gap = abs(fine - coarse)
    stable = gap <= rtol * max(fine, coarse) or max(fine, coarse) <= floor
    return OracleReport(
        f"d{k}",
        fine,
        [],
        "central finite differences",
        int(vals.size * len(_directions(vals.ndim - 1)) * 2),
        {"coarse": coarse, "richardson_gap": gap / max(fine, coarse, floor), "stable": bool(stable), "floor": floor},
    )
