import json

import numpy as np
import pytest

from reifenberg.cli import (
    EXIT_CERTIFICATION,
    EXIT_HYPOTHESIS,
    EXIT_INPUT,
    EXIT_OK,
    main,
    order_curve,
    read_pgm,
    read_points_csv,
    write_pgm,
)
from reifenberg.oracle import gamma_sweep_2d
from reifenberg.synth import snowflake_vertex_count


def run(*args):
    return main([str(a) for a in args])


def load(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def circle_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert run("generate", "circle", "--r", 1, "--m", 1024, "--r0", 0.5, "--output-dir", d) == EXIT_OK
    return d / "circle.csv"


def test_generate_circle_round_trip(circle_csv):
    E = read_points_csv(circle_csv)
    assert len(E) == 1024 and E.n == 2 and E.d == 1 and E.r0 == 0.5
    np.testing.assert_allclose(np.linalg.norm(E.points, axis=1), 1.0, atol=1e-15)
    side = load(circle_csv.with_suffix(".json"))
    assert side["schema_version"] == 1 and side["count"] == 1024
    assert side["sample_gap"] == E.sample_gap


def test_generate_snowflake_row_count(tmp_path):
    assert run("generate", "snowflake", "--theta", 0.05, "--depth", 3, "--output-dir", tmp_path) == EXIT_OK
    E = read_points_csv(tmp_path / "snowflake.csv")
    assert len(E) == snowflake_vertex_count(0.05, 3)
    _, closed = order_curve(E.points)
    assert closed


def test_generate_rejects_large_bend(tmp_path, capsys):
    assert run("generate", "snowflake", "--theta", 0.5, "--output-dir", tmp_path) == EXIT_INPUT
    assert "error" in capsys.readouterr().err


def test_usage_error_exits_2():
    assert run("build") == EXIT_INPUT


def test_missing_and_empty_inputs(tmp_path):
    assert run("analyze", "--input", tmp_path / "none.csv", "--output-dir", tmp_path) == EXIT_INPUT
    (tmp_path / "empty.csv").write_text("")
    assert run("analyze", "--input", tmp_path / "empty.csv", "--output-dir", tmp_path) == EXIT_INPUT
    (tmp_path / "bad.csv").write_text("1,2\n")
    assert run("analyze", "--input", tmp_path / "bad.csv", "--output-dir", tmp_path) == EXIT_INPUT


def test_analyze_profile_matches_sweep(circle_csv, tmp_path):
    assert run("analyze", "--input", circle_csv, "--stride", 128, "--output-dir", tmp_path) == EXIT_OK
    rep = load(tmp_path / "flatness.json")
    prof = rep["profile"]
    g = [p["gamma_max"] for p in prof]
    assert np.all(np.diff(g) > 0)  # increasing with r on a circle
    E = read_points_csv(circle_csv)
    for p in prof:
        sweep = gamma_sweep_2d(E, E.points[0], p["r"], 10_000).value
        assert sweep - 1e-12 <= p["gamma_max"] <= sweep + 1e-3


def test_analyze_plane_is_flat(tmp_path):
    assert run("generate", "plane", "--n", 3, "--m", 41 * 41, "--half-width", 1.0, "--r0", 0.5,
               "--output-dir", tmp_path) == EXIT_OK
    assert run("analyze", "--input", tmp_path / "plane.csv", "--radii", 0.5, "--stride", 200,
               "--output-dir", tmp_path) == EXIT_OK
    # only the sampling floor remains: the plane side sees holes of size sample_gap
    E = read_points_csv(tmp_path / "plane.csv")
    assert load(tmp_path / "flatness.json")["epsilon_max"] <= E.sample_gap / 0.5 + 1e-12


def test_reports_are_byte_identical(circle_csv, tmp_path):
    out = []
    for _ in range(2):
        assert run("analyze", "--input", circle_csv, "--stride", 256, "--output-dir", tmp_path) == EXIT_OK
        out.append((tmp_path / "flatness.json").read_bytes())
    assert out[0] == out[1]


def test_build_circle_passes(circle_csv, tmp_path):
    assert run("build", "--input", circle_csv, "--epsilon-budget", 1, "--output-dir", tmp_path) == EXIT_OK
    rep = load(tmp_path / "report.json")
    assert rep["ok"] and all(rep["checks"].values())
    assert set(rep["checks"]) == {"proximity", "graph_identity", "derivatives_finite", "derivatives_richardson"}
    assert rep["overrides"] == {"epsilon_budget": 1.0}
    lines = (tmp_path / "surface.polyline.csv").read_text().splitlines()
    assert lines[0].endswith("closed=1")
    pts = np.loadtxt(lines[1:], delimiter=",")
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-3)
    # consecutive polyline points are neighbours along the circle
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert steps.max() < 0.05


def test_build_over_budget_exits_3(circle_csv, tmp_path):
    assert run("build", "--input", circle_csv, "--output-dir", tmp_path) == EXIT_HYPOTHESIS
    fail = load(tmp_path / "failure.json")
    assert fail["error"] == "FlatnessBudgetExceeded"
    assert fail["details"]["epsilon"] > fail["details"]["budget"] == 1e-2


def test_build_rejects_raster_format(circle_csv, tmp_path):
    assert run("build", "--input", circle_csv, "--epsilon-budget", 1, "--format", "pgm",
               "--output-dir", tmp_path) == EXIT_INPUT


def test_domains_circle_rasters(tmp_path):
    assert run("generate", "circle", "--m", 4096, "--r0", 0.3, "--output-dir", tmp_path) == EXIT_OK
    assert run("domains", "--input", tmp_path / "circle.csv", "--output-dir", tmp_path) == EXIT_OK
    rep = load(tmp_path / "domains.json")
    assert rep["ok"] and rep["report"]["U_count"] == 2
    W1 = read_pgm(tmp_path / "domains_W1.pgm")
    W2 = read_pgm(tmp_path / "domains_W2.pgm")
    assert not np.any(W1 & W2)
    # volumes are cell counts times the common cell volume
    assert W1.sum() / W2.sum() == pytest.approx(rep["volumes"]["W1"] / rep["volumes"]["W2"], rel=1e-12)
    # the center of the raster is inside the circle, the corner outside
    c = tuple(s // 2 for s in W1.shape)
    assert W1[c] != W2[c] and W1[0, 0] != W2[0, 0] and W1[c] != W1[0, 0]


def test_domains_need_codimension_one(tmp_path):
    # a circle lying in a plane of R^3 has codimension two
    t = np.linspace(0, 2 * np.pi, 512, endpoint=False)
    path = tmp_path / "c3.csv"
    path.write_text("# n=3 d=1 r0=0.3 sample_gap=0.0062\n")
    with open(path, "a") as fh:
        np.savetxt(fh, np.c_[np.cos(t), np.sin(t), 0 * t], delimiter=",")
    assert run("domains", "--input", path, "--output-dir", tmp_path) == EXIT_INPUT
    assert run("certify", "--input", path, "--output-dir", tmp_path) == EXIT_INPUT


def test_pgm_round_trip(tmp_path):
    mask = np.random.default_rng(0).uniform(size=(7, 5)) < 0.5
    write_pgm(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), mask)


def test_certify_open_arcs_exits_4(tmp_path):
    assert run("generate", "two_arcs", "--m", 4096, "--r0", 0.3, "--output-dir", tmp_path) == EXIT_OK
    code = run("certify", "--input", tmp_path / "two_arcs.csv", "--ladder-min", 0.1, "--output-dir", tmp_path)
    assert code == EXIT_CERTIFICATION
    fail = load(tmp_path / "failure.json")
    assert fail["error"] == "ComponentCountMismatch" and fail["details"]["count"] == 1
