"""Parametric test sets with controlled flatness."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import SphericalVoronoi, cKDTree

from .errors import InvalidSpec
from .geometry import PointCloud

KINDS = ("circle", "sphere", "snowflake", "graph", "plane", "two_arcs")


@dataclass
class GeneratorSpec:
    kind: str
    m: int | None = 4096
    radius: float = 1.0
    theta: float = 0.05
    depth: int = 5
    amplitude: float = 0.0
    eta: float = 0.0
    n: int = 2
    r0: float = 0.5
    half_width: float = 2.0
    seed: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.m is not None and self.m < 16:
            raise InvalidSpec("m must be at least 16")
        if self.eta < 0:
            raise InvalidSpec("eta must be non-negative")
        if not (0 <= self.theta < math.pi / 8):
            raise InvalidSpec(f"theta must lie in [0, pi/8), got {self.theta}")
        if self.radius <= 0 or self.r0 <= 0:
            raise InvalidSpec("radius and r0 must be positive")
        if self.depth < 0:
            raise InvalidSpec("depth must be non-negative")
        if self.kind == "sphere" and self.n < 3:
            raise InvalidSpec("sphere needs n >= 3")
        return self


def _circle(R, m):
    t = 2 * np.pi * np.arange(m) / m
    pts = R * np.stack([np.cos(t), np.sin(t)], axis=1)
    return pts, 2 * R * math.sin(math.pi / (2 * m))


def _fibonacci_sphere(R, m, n=3):
    if n != 3:
        raise InvalidSpec("sphere generator supports n = 3 only")
    k = np.arange(m) + 0.5
    z = 1 - 2 * k / m
    phi = np.pi * (1 + 5 ** 0.5) * k
    rho = np.sqrt(1 - z * z)
    unit = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    # farthest points of the sphere from the sample are Voronoi vertices
    vor = SphericalVoronoi(unit, radius=1.0)
    gap, _ = cKDTree(unit).query(vor.vertices)
    return R * unit, R * float(gap.max())


def koch_polygon(theta, depth, R=1.0):
    """Closed Koch-type curve: a regular polygon whose edges are replaced
    ``depth`` times by four equal segments bent outward by ``theta``.

    The polygon has ``max(3, ceil(2 pi / theta))`` sides so its corners turn by
    at most about ``theta``.  Returns the (M * 4**depth, 2) vertex array.
    """
    sides = 3 if theta <= 0 else max(3, math.ceil(2 * math.pi / theta))
    t = 2 * np.pi * np.arange(sides) / sides
    verts = R * np.stack([np.cos(t), np.sin(t)], axis=1)
    c, s = math.cos(theta), math.sin(theta)
    for _ in range(depth):
        p = verts
        q = np.roll(verts, -1, axis=0)
        u = q - p
        L = np.linalg.norm(u, axis=1, keepdims=True)
        u = u / L
        nrm = np.stack([u[:, 1], -u[:, 0]], axis=1)  # outward for counter-clockwise curves
        seg = L / (2 * (1 + c))
        a = p + seg * u
        apex = 0.5 * (p + q) + seg * s * nrm
        b = q - seg * u
        verts = np.stack([p, a, apex, b], axis=1).reshape(-1, 2)
    return verts


def resample_closed(verts, m):
    """m points equally spaced in arclength along a closed polyline.

    Returns the points and half the arclength spacing, which bounds the
    distance from any curve point to the sample.
    """
    seg = np.linalg.norm(np.roll(verts, -1, axis=0) - verts, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = np.arange(m) * (total / m)
    k = np.searchsorted(cum, s, side="right") - 1
    frac = (s - cum[k]) / seg[k]
    nxt = (k + 1) % len(verts)
    pts = verts[k] + frac[:, None] * (verts[nxt] - verts[k])
    return pts, 0.5 * total / m


def _snowflake(spec):
    verts = koch_polygon(spec.theta, spec.depth, spec.radius)
    if spec.m is None:
        seg = np.linalg.norm(np.roll(verts, -1, axis=0) - verts, axis=1)
        return verts, 0.5 * float(seg.max())
    return resample_closed(verts, spec.m)


def snowflake_vertex_count(theta, depth):
    sides = 3 if theta <= 0 else max(3, math.ceil(2 * math.pi / theta))
    return sides * 4 ** depth


def _plane(spec, d):
    """Lattice on the d-cube [-half_width, half_width]^d inside R^n."""
    per_axis = max(2, int(round(spec.m ** (1.0 / d))))
    ax = np.linspace(-spec.half_width, spec.half_width, per_axis)
    pitch = ax[1] - ax[0]
    mesh = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    pts = np.zeros((mesh.shape[0], spec.n))
    pts[:, :d] = mesh
    if spec.amplitude:
        pts[:, d] = spec.amplitude * np.prod(np.sin(2 * np.pi * mesh / (4 * spec.r0)), axis=1)
    inner = np.all(np.abs(mesh) <= spec.half_width - spec.r0, axis=1)
    lip = spec.amplitude * 2 * np.pi / (4 * spec.r0) * math.sqrt(d)
    gap = 0.5 * pitch * math.sqrt(d) * math.sqrt(1 + lip * lip)
    return pts, gap, inner


def _two_arcs(spec):
    m1 = spec.m // 2
    t = np.linspace(0.1 * np.pi, 0.9 * np.pi, m1)
    arc = spec.radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    pts = np.vstack([arc, -arc])
    gap = 0.5 * spec.radius * (t[1] - t[0])
    return pts, gap


def generate(spec: GeneratorSpec) -> PointCloud:
    """Deterministic sample of the requested set (noise from ``spec.seed``)."""
    spec.validate()
    interior = None
    meta = {"spec": asdict(spec)}
    if spec.kind == "circle":
        pts, gap = _circle(spec.radius, spec.m)
        d = 1
        meta["gamma_prediction"] = "gamma(x, r) ~ r / R for r << R"
    elif spec.kind == "sphere":
        pts, gap = _fibonacci_sphere(spec.radius, spec.m, spec.n)
        d = spec.n - 1
    elif spec.kind == "snowflake":
        pts, gap = _snowflake(spec)
        d = 1
    elif spec.kind == "two_arcs":
        pts, gap = _two_arcs(spec)
        d = 1
    elif spec.kind in ("plane", "graph"):
        d = spec.n - 1
        if spec.kind == "plane" and spec.amplitude:
            raise InvalidSpec("plane takes no amplitude; use kind='graph'")
        pts, gap, interior = _plane(spec, d)
    else:  # pragma: no cover - validate() guards this
        raise InvalidSpec(spec.kind)
    if spec.n > pts.shape[1]:
        pts = np.hstack([pts, np.zeros((pts.shape[0], spec.n - pts.shape[1]))])
    E = PointCloud(pts, d, spec.r0, gap, interior, meta)
    if spec.eta > 0:
        E = add_noise(E, spec.eta, spec.seed)
    return E


def add_noise(E: PointCloud, eta, seed=0) -> PointCloud:
    """Independent perturbations, uniform in the ball of radius ``eta``.

    The sample density is unchanged, so ``sample_gap`` is kept; ``meta``
    records the noise level.
    """
    if eta < 0:
        raise InvalidSpec("eta must be non-negative")
    if eta == 0:
        return E
    rng = np.random.default_rng(seed)
    g = rng.normal(size=E.points.shape)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rad = eta * rng.uniform(size=(E.points.shape[0], 1)) ** (1.0 / E.n)
    meta = dict(E.meta, eta=float(eta), noise_seed=int(seed))
    return PointCloud(E.points + rad * g, E.d, E.r0, E.sample_gap, E.interior, meta)
