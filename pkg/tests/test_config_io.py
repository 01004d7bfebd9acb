import numpy as np
import pytest

from prestrain.config import (ConfigError, RunConfig, config_hash, from_mapping, header_lines, parse_config,
                              read_metric_csv, serialize)
from prestrain.geometry import SurfaceImmersion, conformal_metric, plane_surface
from prestrain.grid import Grid
from prestrain.io import export_mesh, read_field_csv, read_obj, read_sym2_field, write_field_csv


def test_minimal_config_fills_defaults():
    cfg = parse_config("command = sweep\n")
    assert cfg == RunConfig()
    assert cfg.hs == (0.2, 0.1, 0.05, 0.025)


def test_two_thickness_values_rejected():
    with pytest.raises(ConfigError, match="fit requires >= 3"):
        parse_config("command = sweep\nhs = 0.2, 0.1\n")


def test_errors_name_key_and_line():
    with pytest.raises(ConfigError) as info:
        parse_config("command = sweep\n\nbogus = 1\n")
    assert info.value.key == "bogus" and info.value.line == 3
    with pytest.raises(ConfigError) as info:
        parse_config("grid_n = twelve\n")
    assert info.value.key == "grid_n" and info.value.line == 1
    with pytest.raises(ConfigError):
        parse_config("grid_n = 3\n")
    with pytest.raises(ConfigError):
        parse_config("k = 1\nk = 2\n")


def test_conformal_phi_builds_metric():
    cfg = parse_config("metric = conformal\nphi = [0, 0, 0.5]\n")
    g = cfg.build_metric()
    x = np.array([0.1, 0.2, 0.4])
    ref = conformal_metric([0.0, 0.0, 0.5])(x)
    assert np.allclose(g(x), ref)
    assert np.allclose(g(x), np.exp(2 * 0.5 * 0.4**2) * np.eye(3))


def test_round_trip_and_hash():
    cfg = from_mapping({"metric": "codazzi", "c": "0.3", "hs": "0.3, 0.2, 0.1", "seed": "7", "tol_compat": "1e-9"})
    again = parse_config(serialize(cfg))
    assert again == cfg
    assert serialize(again) == serialize(cfg)
    assert config_hash(again) == config_hash(cfg)
    assert config_hash(cfg) != config_hash(RunConfig())
    lines = header_lines(cfg)
    assert lines[0] == f"config_sha256 = {config_hash(cfg)}"
    assert lines[1] == "seed = 7"


def test_float_round_trip_exact():
    cfg = from_mapping({"eps": 0.1 + 0.2, "dt": 1 / 3})
    assert parse_config(serialize(cfg)).eps == 0.1 + 0.2


def test_tabulated_metric_csv(tmp_path):
    ax = np.linspace(-1, 1, 5)
    rows = []
    for a in ax:
        for b in ax:
            for c in ax:
                g = np.diag([1 + 0.1 * a * a, 1.0, 1.0 + c * c])
                rows.append([a, b, c] + list(g.ravel()))
    head = "x1,x2,x3," + ",".join(f"g{i}{j}" for i in range(1, 4) for j in range(1, 4))
    path = tmp_path / "metric.csv"
    np.savetxt(path, np.array(rows), delimiter=",", header=head, comments="")
    g = read_metric_csv(path)
    assert np.allclose(g(np.array([0.5, 0.0, 0.0])), np.diag([1.025, 1.0, 1.0]), atol=1e-3)
    assert g.smoothness == 2
    (tmp_path / "bad.csv").write_text("x1,x2\n0,0\n")
    with pytest.raises(ConfigError):
        read_metric_csv(tmp_path / "bad.csv")


def test_obj_three_by_three(tmp_path):
    X, Y = np.meshgrid(np.arange(3.0), np.arange(3.0), indexing="ij")
    y = np.stack([X, Y, 0 * X], -1)
    path = tmp_path / "flat.obj"
    export_mesh(y, path, ["config_sha256 = abc"])
    verts, faces = read_obj(path)
    assert verts.shape == (9, 3)
    assert len(faces) == 4 and all(len(f) == 4 for f in faces)
    assert path.read_text().startswith("# config_sha256 = abc\n")


def test_obj_corrugated_round_trip(tmp_path):
    g = Grid.square(16)
    X, Y = g.mesh
    y = SurfaceImmersion.from_surface(plane_surface(), g).y
    y[..., 2] = 0.01 * np.sin(40 * X)
    path = tmp_path / "c.obj"
    export_mesh(y, path)
    verts, faces = read_obj(path)
    assert np.array_equal(verts, y.reshape(-1, 3))
    assert len(faces) == 15 * 15


def test_field_csv_round_trip(tmp_path, rng):
    g = Grid.square(9)
    f = rng.standard_normal(g.shape)
    X, Y = g.mesh
    path = tmp_path / "S.csv"
    write_field_csv(g, {"m11": f, "m12": X, "m22": Y}, path, ["seed = 0"])
    x1, x2, cols = read_field_csv(path)
    assert np.array_equal(cols["m11"], f)
    _, _, M = read_sym2_field(path)
    assert np.array_equal(M[..., 0, 1], X) and np.array_equal(M[..., 1, 0], X)
    write_field_csv(g, {"v": f}, tmp_path / "v.csv")
    with pytest.raises(ValueError):
        read_sym2_field(tmp_path / "v.csv")
