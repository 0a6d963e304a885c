"""Command-line pipelines and file formats.

Commands: ``generate``, ``analyze``, ``build``, ``domains``, ``certify``.
Exit codes are 0 on success, 2 for usage or input errors, 3 when the
flatness hypothesis fails and 4 when a certificate is violated.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from . import __version__
from .errors import CertificationError, HypothesisError, InputError, InvalidPointCloud, ReifenbergError

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_HYPOTHESIS, EXIT_CERTIFICATION = 0, 2, 3, 4
FORMATS = ("json", "obj", "pgm", "vox")


@dataclass
class RunConfig:
    """Settings shared by all commands.

    ``epsilon_budget=None`` means the command default: 1e-2 for ``build`` and
    the domain default for ``domains`` and ``certify``.  ``grid`` is the
    number of cells per unit ``C0 eps r``.  ``ladder_min=None`` means r0/27.
    """

    epsilon_budget: float | None = None
    a_ratio: float = 1.0 / 32
    k_max: int = 3
    grid: float = 4.0
    r0: float | None = None
    ladder_min: float | None = None
    seed: int = 0
    input: str | None = None
    output_dir: str = "."
    format: str | None = None
    overrides: dict = field(default_factory=dict)

    def to_json(self):
        out = asdict(self)
        out.pop("overrides")
        return out


# ---------------------------------------------------------------------------
# file formats


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, (set, tuple)):
        return list(o)
    if hasattr(o, "to_json"):
        return o.to_json()
    return repr(o)


def _clean(o):
    """Recursively make keys strings and non-finite floats JSON-safe."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)):
        v = float(o)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return o


def write_json(path, obj):
    """Write a report with ``schema_version``; keys sorted for byte-stable output."""
    payload = dict(obj)
    payload.setdefault("schema_version", SCHEMA_VERSION)
    text = json.dumps(_clean(json.loads(json.dumps(payload, default=_jsonable))), indent=1, sort_keys=True)
    Path(path).write_text(text + "\n")
    return path


def write_points_csv(path, E):
    header = f"# n={E.n} d={E.d} r0={E.r0!r} sample_gap={E.sample_gap!r}\n"
    with open(path, "w") as fh:
        fh.write(header)
        np.savetxt(fh, E.points, delimiter=",", fmt="%.17g")
    return path


def read_header(line):
    if not line.startswith("#"):
        raise InvalidPointCloud("missing '# n= d= r0= sample_gap=' header")
    vals = {}
    for tok in line[1:].split():
        if "=" in tok:
            k, v = tok.split("=", 1)
            vals[k] = v
    missing = [k for k in ("n", "d", "r0", "sample_gap") if k not in vals]
    if missing:
        raise InvalidPointCloud(f"header lacks {', '.join(missing)}")
    return int(vals["n"]), int(vals["d"]), float(vals["r0"]), float(vals["sample_gap"])


def read_points_csv(path, r0=None):
    """Point cloud from the CSV format; ``r0`` overrides the header value."""
    from .geometry import PointCloud

    path = Path(path)
    if not path.exists():
        raise InvalidPointCloud(f"no such file: {path}")
    text = path.read_text()
    if not text.strip():
        raise InvalidPointCloud(f"{path} is empty")
    first, _, rest = text.partition("\n")
    n, d, hr0, gap = read_header(first.strip())
    rows = [ln for ln in rest.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise InvalidPointCloud(f"{path} has no points")
    try:
        pts = np.array([[float(v) for v in ln.split(",")] for ln in rows])
    except ValueError as exc:
        raise InvalidPointCloud(f"unparsable row in {path}: {exc}") from None
    if pts.ndim != 2 or pts.shape[1] != n:
        raise InvalidPointCloud(f"rows must have n={n} fields")
    interior = None
    side = path.with_suffix(".json")
    meta = {}
    if side.exists():
        meta = json.loads(side.read_text())
        if "interior" in meta:
            interior = np.zeros(len(pts), dtype=bool)
            interior[np.asarray(meta["interior"], dtype=int)] = True
    return PointCloud(pts, d, hr0 if r0 is None else r0, gap, interior, {"source": str(path)})


def order_curve(pts, close_factor=3.0):
    """Order a curve sample by walking to the nearest unvisited neighbour ahead.

    Returns ``(order, closed)``.  The walk runs forward from point 0, then
    backward, so open curves are recovered from any start point.
    """
    pts = np.asarray(pts, dtype=float)
    m = len(pts)
    if m < 3:
        return np.arange(m), False
    tree = cKDTree(pts)
    k = min(m, 12)
    dist, nb = tree.query(pts, k=k)
    step = float(np.median(dist[:, 1]))
    seen = np.zeros(m, dtype=bool)
    seen[0] = True

    def walk(start, direction):
        path = []
        cur = start
        heading = direction
        while True:
            cand = [j for j in nb[cur, 1:] if not seen[j]]
            best = None
            for j in cand:
                v = pts[j] - pts[cur]
                if heading is None or v @ heading > 0:
                    best = j
                    break
            if best is None:
                return path
            heading = pts[best] - pts[cur]
            seen[best] = True
            path.append(best)
            cur = best

    fwd = walk(0, None)
    back_dir = pts[0] - pts[fwd[0]] if fwd else None
    back = walk(0, back_dir)
    order = np.array(back[::-1] + [0] + fwd, dtype=np.int64)
    closed = bool(len(order) == m and np.linalg.norm(pts[order[0]] - pts[order[-1]]) <= close_factor * step)
    return order, closed


def write_polyline(path, pts, closed):
    pts = np.asarray(pts, dtype=float)
    with open(path, "w") as fh:
        fh.write(f"# polyline n={pts.shape[1]} points={len(pts)} closed={int(closed)}\n")
        np.savetxt(fh, pts, delimiter=",", fmt="%.17g")
    return path


def surface_mesh(atlas, edge_factor=4.0):
    """Triangles over a d=2 sample by Delaunay in each net plane.

    A triangle is kept by the net point nearest its centroid, so each region
    is meshed once; triangles with an edge above ``edge_factor`` times the
    median neighbour distance are dropped.  A viewing aid, not a certificate.
    """
    S = atlas.point_sample
    if atlas.E.d != 2:
        raise InputError("meshes need d = 2")
    tree = cKDTree(S)
    step = float(np.median(tree.query(S, k=2)[0][:, 1]))
    net_tree = cKDTree(atlas.net.coords)
    faces = set()
    for q, x in enumerate(atlas.net.coords):
        idx = np.asarray(tree.query_ball_point(x, 3 * atlas.a), dtype=np.int64)
        if len(idx) < 3:
            continue
        P = atlas.planes[q]
        try:
            tri = Delaunay(P.tangential(S[idx]))
        except Exception:  # degenerate neighbourhood (collinear sample)
            continue
        simp = idx[tri.simplices]
        cen = S[simp].mean(1)
        keep = net_tree.query(cen)[1] == q
        v = S[simp]
        edges = np.stack([np.linalg.norm(v[:, i] - v[:, (i + 1) % 3], axis=1) for i in range(3)], 1)
        keep &= edges.max(1) <= edge_factor * step
        nrm = P.normal_frame[0]
        for f in simp[keep]:
            a, b, c = S[f]
            if np.cross(b - a, c - a) @ nrm < 0:
                f = f[[0, 2, 1]]
            faces.add((tuple(sorted(int(i) for i in f)), tuple(int(i) for i in f)))
    uniq = {}
    for key, f in sorted(faces):
        uniq.setdefault(key, f)
    return S, np.array(list(uniq.values()), dtype=np.int64).reshape(-1, 3)


def write_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write("v " + " ".join(f"{c:.17g}" for c in v) + "\n")
        for f in faces:
            fh.write("f " + " ".join(str(int(i) + 1) for i in f) + "\n")
    return path


def write_pgm(path, mask2d):
    """Binary P5 image; row 0 is the top (largest second coordinate)."""
    img = np.where(np.asarray(mask2d, dtype=bool).T[::-1], 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
    return path


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise InputError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    img = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return img[::-1].T > 0


def write_vox(path, mask3d, grid):
    """Raw uint8 voxels in C order plus a JSON header ``<path>.json``."""
    arr = np.ascontiguousarray(np.asarray(mask3d, dtype=np.uint8))
    Path(path).write_bytes(arr.tobytes())
    write_json(str(path) + ".json", {"shape": list(arr.shape), "dtype": "uint8", "order": "C",
                                     "grid": grid.to_json()})
    return path


# ---------------------------------------------------------------------------
# reports


def build_report(stage, smoothed, C0_budget=100.0, richardson_tol=0.1):
    """Certificates of the stage-N atlas and the smoothed surface with verdicts."""
    sc = stage.certificates
    sm = smoothed.certificates
    checks = {
        "proximity": bool(sc["C0"] <= C0_budget),
        "graph_identity": bool(sc["graph_identity_ok"]),
    }
    if "Lambda" in sm:
        lam = sm["Lambda"]
        checks["derivatives_finite"] = bool(all(np.isfinite(v) for v in lam.values()))
        checks["derivatives_richardson"] = bool(all(v <= richardson_tol for v in sm["richardson_gap"].values()))
    return {
        "stage": stage.to_json(include_patches=False),
        "smoothed": sm,
        "checks": checks,
        "ok": bool(all(checks.values())),
    }


def _overrides(cfg: RunConfig):
    base = RunConfig()
    return {f.name: getattr(cfg, f.name) for f in fields(RunConfig)
            if f.name not in ("overrides", "input", "output_dir") and getattr(cfg, f.name) != getattr(base, f.name)}


def _base_report(command, cfg: RunConfig):
    return {"command": command, "version": __version__, "config": cfg.to_json(), "overrides": _overrides(cfg)}


def _domain_config(cfg: RunConfig):
    from .codim1 import DomainConfig

    dc = DomainConfig(a_ratio=cfg.a_ratio, k_max=cfg.k_max, grid_divisor=cfg.grid)
    if cfg.epsilon_budget is not None:
        dc = DomainConfig(**dict(asdict(dc), epsilon_budget=cfg.epsilon_budget))
    return dc


def _out(cfg: RunConfig, name):
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


# ---------------------------------------------------------------------------
# commands


def cmd_generate(spec, cfg: RunConfig, name=None):
    """Write ``<name>.csv`` and the JSON sidecar; returns the CSV path."""
    from .synth import generate

    E = generate(spec)
    name = name or spec.kind
    path = _out(cfg, f"{name}.csv")
    write_points_csv(path, E)
    side = {"spec": asdict(spec), "n": E.n, "d": E.d, "r0": E.r0, "sample_gap": E.sample_gap,
            "count": len(E), "meta": {k: v for k, v in E.meta.items() if k != "spec"}}
    if E.interior is not None:
        side["interior"] = np.flatnonzero(E.interior).tolist()
    write_json(path.with_suffix(".json"), side)
    return path


def cmd_analyze(cfg: RunConfig, radii=None, stride=1):
    from .geometry import flatness_scan

    E = read_points_csv(cfg.input, cfg.r0)
    if radii is None:
        r_min = cfg.ladder_min if cfg.ladder_min is not None else E.r0 / 9
        from .codim1 import ladder_scales

        radii = ladder_scales(E.r0, r_min)
    centers = E.center_indices()[:: max(1, int(stride))]
    rep = flatness_scan(E, sorted(radii, reverse=True), centers=centers)
    profile = {}
    for e in rep.entries:
        profile[e["r"]] = max(profile.get(e["r"], 0.0), e["gamma"])
    out = _base_report("analyze", cfg)
    out.update(flatness=rep.to_json(), profile=[{"r": r, "gamma_max": g} for r, g in sorted(profile.items())],
               epsilon_max=rep.epsilon_max)
    write_json(_out(cfg, "flatness.json"), out)
    return out


def cmd_build(cfg: RunConfig):
    from .smooth import SmoothingConfig, smooth_surface
    from .surface import BuildConfig, build_surface

    E = read_points_csv(cfg.input, cfg.r0)
    budget = 1e-2 if cfg.epsilon_budget is None else cfg.epsilon_budget
    stage = build_surface(E, config=BuildConfig(epsilon_budget=budget, a_ratio=cfg.a_ratio))
    sm = smooth_surface(stage, cfg=SmoothingConfig(k_max=cfg.k_max, kernel_order=max(5, cfg.k_max + 2)))
    out = _base_report("build", cfg)
    out.update(build_report(stage, sm))
    fmt = cfg.format or ("obj" if E.d == 2 else "json")
    if E.d == 1:
        order, closed = order_curve(sm.point_sample)
        out["polyline"] = str(write_polyline(_out(cfg, "surface.polyline.csv"), sm.point_sample[order], closed))
    if fmt == "obj":
        if E.d != 2:
            raise InputError("obj output needs d = 2")
        V, F = surface_mesh(sm)
        out["mesh"] = str(write_obj(_out(cfg, "surface.obj"), V, F))
        out["mesh_faces"] = int(len(F))
    elif fmt not in ("json",):
        raise InputError(f"format {fmt!r} does not apply to build")
    write_json(_out(cfg, "atlas.json"), sm.to_json(include_patches=False))
    write_json(_out(cfg, "report.json"), out)
    if not out["ok"]:
        raise CertificationError("build certificates failed", checks=out["checks"])
    return out


def _export_domains(cfg: RunConfig, dom, fmt, stem):
    grid = dom.W1.grid
    paths = {}
    for j, W in ((1, dom.W1), (2, dom.W2)):
        mask = W.mask.reshape(grid.shape)
        if fmt == "pgm":
            paths[f"W{j}"] = str(write_pgm(_out(cfg, f"{stem}_W{j}.pgm"), mask))
        elif fmt == "vox":
            paths[f"W{j}"] = str(write_vox(_out(cfg, f"{stem}_W{j}.vox"), mask, grid))
    return paths


def cmd_domains(cfg: RunConfig):
    from .codim1 import inner_domains

    E = read_points_csv(cfg.input, cfg.r0)
    if E.d != E.n - 1:
        from .errors import UnsupportedCodimension

        raise UnsupportedCodimension(f"domains need d = n - 1, got d={E.d}, n={E.n}")
    fmt = cfg.format or ("pgm" if E.n == 2 else "vox")
    if fmt == "pgm" and E.n != 2 or fmt == "vox" and E.n != 3 or fmt not in ("pgm", "vox", "json"):
        raise InputError(f"format {fmt!r} does not fit n={E.n}")
    dom = inner_domains(E, E.r0, cfg=_domain_config(cfg))
    out = _base_report("domains", cfg)
    out["report"] = dom.report
    out["volumes"] = {"W1": dom.W1.volume, "W2": dom.W2.volume}
    out["rasters"] = _export_domains(cfg, dom, fmt, "domains")
    out["ok"] = bool(dom.report.get("ok", False))
    write_json(_out(cfg, "domains.json"), out)
    if not out["ok"]:
        raise CertificationError("domain certificates failed")
    return out


def cmd_certify(cfg: RunConfig):
    from .codim1 import certify_two_components

    E = read_points_csv(cfg.input, cfg.r0)
    if E.d != E.n - 1:
        from .errors import UnsupportedCodimension

        raise UnsupportedCodimension(f"certification needs d = n - 1, got d={E.d}, n={E.n}")
    r_min = cfg.ladder_min if cfg.ladder_min is not None else E.r0 / 27
    rep = certify_two_components(E, r_min, _domain_config(cfg))
    out = _base_report("certify", cfg)
    out["report"] = rep
    out["ok"] = bool(rep.get("ok", False))
    write_json(_out(cfg, "certify.json"), out)
    if not out["ok"]:
        raise CertificationError("component certification failed")
    return out


# ---------------------------------------------------------------------------
# entry point


def _limit_threads():
    n = os.environ.get("REIFENBERG_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return None
    return threadpool_limits(int(n))


def make_parser():
    p = argparse.ArgumentParser(prog="reifenberg", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", default=".")
    common.add_argument("--epsilon-budget", type=float, default=None)
    common.add_argument("--a-ratio", type=float, default=1.0 / 32)
    common.add_argument("--kmax", type=int, default=3)
    common.add_argument("--grid", type=float, default=4.0, help="cells per unit C0 eps r")
    common.add_argument("--r0", type=float, default=None, help="override the header r0")
    common.add_argument("--ladder-min", type=float, default=None)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=FORMATS, default=None)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic point cloud")
    g.add_argument("kind")
    g.add_argument("--r", "--radius", dest="radius", type=float, default=1.0)
    g.add_argument("--m", type=int, default=None)
    g.add_argument("--theta", type=float, default=0.05)
    g.add_argument("--depth", type=int, default=5)
    g.add_argument("--n", type=int, default=None)
    g.add_argument("--eta", type=float, default=0.0)
    g.add_argument("--amplitude", type=float, default=0.0)
    g.add_argument("--half-width", type=float, default=2.0)
    g.add_argument("--name", default=None)

    a = sub.add_parser("analyze", parents=[common], help="flatness profile of a point cloud")
    a.add_argument("--input", required=True)
    a.add_argument("--radii", type=float, nargs="+", default=None)
    a.add_argument("--stride", type=int, default=1, help="use every k-th sample as a center")

    for name, text in (("build", "smooth surface and certificates"),
                       ("domains", "inner domains at scale r0"),
                       ("certify", "two-component certificate over the scale ladder")):
        c = sub.add_parser(name, parents=[common], help=text)
        c.add_argument("--input", required=True)
    return p


def _config(args):
    cfg = RunConfig(
        epsilon_budget=args.epsilon_budget, a_ratio=args.a_ratio, k_max=args.kmax, grid=args.grid,
        r0=args.r0, ladder_min=args.ladder_min, seed=args.seed, input=getattr(args, "input", None),
        output_dir=args.output_dir, format=args.format,
    )
    cfg.overrides = _overrides(cfg)
    return cfg


def run(argv=None):
    args = make_parser().parse_args(argv)
    cfg = _config(args)
    if args.command == "generate":
        from .synth import GeneratorSpec

        m = args.m
        if m is None and args.kind != "snowflake":
            m = 4096
        n = args.n if args.n is not None else (3 if args.kind == "sphere" else 2)
        spec = GeneratorSpec(kind=args.kind, m=m, radius=args.radius, theta=args.theta, depth=args.depth,
                             amplitude=args.amplitude, eta=args.eta, n=n,
                             r0=args.r0 if args.r0 is not None else 0.5,
                             half_width=args.half_width, seed=args.seed)
        cmd_generate(spec, cfg, args.name)
    elif args.command == "analyze":
        cmd_analyze(cfg, args.radii, args.stride)
    elif args.command == "build":
        cmd_build(cfg)
    elif args.command == "domains":
        cmd_domains(cfg)
    elif args.command == "certify":
        cmd_certify(cfg)
    return EXIT_OK


def main(argv=None):
    limits = _limit_threads()
    try:
        return run(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2
        return int(exc.code or 0)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except HypothesisError as exc:
        print(f"hypothesis failure: {exc}", file=sys.stderr)
        _dump_failure(argv, exc)
        return EXIT_HYPOTHESIS
    except CertificationError as exc:
        print(f"certification failure: {exc}", file=sys.stderr)
        _dump_failure(argv, exc)
        return EXIT_CERTIFICATION
    except ReifenbergError as exc:  # pragma: no cover - every error has a category
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATION
    finally:
        if limits is not None:
            limits.unregister()


def _dump_failure(argv, exc):
    """Write the error class, message and witness details to ``failure.json``."""
    try:
        args = make_parser().parse_args(argv)
    except SystemExit:  # pragma: no cover
        return
    out = {"command": args.command, "error": type(exc).__name__, "message": str(exc),
           "details": getattr(exc, "details", {}), "ok": False}
    write_json(_out(_config(args), "failure.json"), out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
