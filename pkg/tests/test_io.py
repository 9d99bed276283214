import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from topoflow.grid import build_grid
from topoflow.io import (
    ConfigError,
    config_from_dict,
    config_to_dict,
    dump_config,
    export_scalar_csv,
    export_vtk,
    index_box,
    parse_config,
    read_scalar_csv,
)
from topoflow.ns_solver import ScalarField, StaggeredVelocity

MINIMAL = {
    "grid": {"nx": 24, "ny": 24},
    "obstacles": [{"kind": "box", "center": [0.5, 0.5], "half_widths": [0.05, 0.05]}],
    "windows": [{"kind": "box", "center": [0.5, 0.875], "half_widths": [0.3, 0.08]}],
}


def doc(**changes):
    d = json.loads(json.dumps(MINIMAL))
    d.update(changes)
    return d


def test_minimal_config_defaults():
    cfg = config_from_dict(doc())
    t = cfg.twin
    assert (t.grid.lx, t.grid.ly) == (1.0, 1.0)
    assert t.solver.nu == 0.01 and t.solver.k_penalty == 1e6 and t.solver.T == 2.0
    assert t.boundary.kind == "lid" and t.boundary.t_ramp == 0.1
    assert t.forcing.kind == "zero"
    assert t.sigma == 0.0 and t.seed == 0
    assert cfg.alpha == 0.5 and cfg.beta == 0.5 and cfg.match_radius is None
    # default hold-all: obstacle box padded by two cells
    assert t.holdall.bounds() == pytest.approx((0.45 - 2 / 24, 0.55 + 2 / 24, 0.45 - 2 / 24, 0.55 + 2 / 24))


def test_negative_viscosity_names_the_key():
    with pytest.raises(ConfigError) as e:
        config_from_dict(doc(solver={"nu": -1}))
    assert "nu" in e.value.key


@pytest.mark.parametrize(
    "changes, key",
    [
        (dict(colour="red"), "colour"),
        (dict(solver={"viscosity": 1}), "viscosity"),
        (dict(grid={"nx": 2, "ny": 24}), "grid"),
        (dict(noise={"sigma": 1.0}), "noise.sigma"),
        (dict(detection={"alpha": 1.5}), "detection.alpha"),
        (dict(boundary={"kind": "slip"}), "boundary.kind"),
        (dict(windows=[]), "windows"),
        (dict(obstacles=["0:3, 0:3"]), None),
    ],
)
def test_invalid_configs_rejected(changes, key):
    with pytest.raises(ConfigError) as e:
        config_from_dict(doc(**changes))
    if key is not None:
        assert key in (e.value.key or "") or key in str(e.value)


def test_json_syntax_error_has_position():
    text = '{\n  "grid": {"nx": 24,, "ny": 24}\n}'
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert e.value.line == 2 and e.value.column == 21


def test_nan_rejected():
    with pytest.raises(ConfigError):
        parse_config(json.dumps(MINIMAL).replace('"ny": 24', '"ny": NaN'))


def test_invalid_utf8_rejected():
    with pytest.raises(ConfigError):
        parse_config(b'{"grid": "\xff"}')


def test_index_box_kilometre_example():
    # 350 x 300 cells of 2 km: index box (201:205) x (271:275) is 8 km x 8 km
    g = build_grid(350, 300, 700000.0, 600000.0)
    s = index_box("(201:205) × (271:275)", g)
    assert s.bounds() == pytest.approx((402000.0, 410000.0, 542000.0, 550000.0))
    assert index_box("201:205, 271:275", g) == s
    assert index_box("201:205 x 271:275", g) == s


@pytest.mark.parametrize("text", ["5:5, 1:2", "1:2", "a:b, 1:2", "1:400, 1:2"])
def test_index_box_rejects(text):
    with pytest.raises(ConfigError):
        index_box(text, build_grid(350, 300, 1.0, 1.0))


def test_config_round_trip_is_canonical():
    cfg = config_from_dict(doc(noise={"sigma": 0.01, "seed": 2**63}))
    text = dump_config(cfg)
    again = parse_config(text)
    assert dump_config(again) == text
    assert again.twin == cfg.twin


coords = st.floats(0.3, 0.7)
widths = st.floats(0.01, 0.04)


@given(coords, coords, widths, st.floats(0.0, 0.99), st.integers(0, 2**64 - 1), st.floats(1e-4, 1.0), st.floats(0.05, 1.0))
def test_round_trip_property(x, y, w, sigma, seed, nu, alpha):
    d = doc(
        obstacles=[{"kind": "disk", "center": [x, y], "radius": w}],
        holdall={"kind": "box", "center": [0.5, 0.5], "half_widths": [0.25, 0.25]},
        noise={"sigma": sigma, "seed": seed},
        solver={"nu": nu},
        detection={"alpha": alpha},
    )
    cfg = config_from_dict(d)
    again = parse_config(dump_config(cfg))
    assert config_to_dict(again) == config_to_dict(cfg)
    assert again.twin.seed == seed and again.twin.sigma == sigma


def test_csv_first_row_and_layout(tmp_path):
    g = build_grid(4, 4, 2.0, 2.0)
    v = np.arange(16, dtype=float).reshape(4, 4) + 1.5
    export_scalar_csv(ScalarField(g, v), tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "i,j,x,y,value"
    assert lines[1] == "0,0,0.25,0.25,1.5"
    assert lines[2] == "1,0,0.75,0.25,5.5"  # i fastest
    assert len(lines) == 17


@given(st.integers(0, 2**32 - 1))
def test_csv_round_trip_bit_exact(tmp_path_factory, seed):
    g = build_grid(7, 5, 1.0, 0.7)
    v = np.random.default_rng(seed).standard_normal(g.shape) * 10.0 ** np.random.default_rng(seed).integers(-30, 30)
    p = tmp_path_factory.mktemp("csv") / "f.csv"
    export_scalar_csv(ScalarField(g, v), p)
    assert np.array_equal(read_scalar_csv(p, g).values, v)


def test_vtk_scalar_header(tmp_path):
    g = build_grid(4, 5, 1.0, 1.25)
    export_vtk(ScalarField(g, np.ones(g.shape)), tmp_path / "f.vtk", "dk")
    lines = (tmp_path / "f.vtk").read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2] == "ASCII" and lines[3] == "DATASET STRUCTURED_POINTS"
    assert lines[4] == "DIMENSIONS 4 5 1"
    assert lines[7] == "POINT_DATA 20"
    assert lines[8].startswith("SCALARS dk") and lines[9] == "LOOKUP_TABLE default"
    assert len(lines) == 10 + 20


def test_vtk_vectors(tmp_path):
    g = build_grid(4, 5, 1.0, 1.25)
    export_vtk(StaggeredVelocity.zeros(g), tmp_path / "v.vtk")
    lines = (tmp_path / "v.vtk").read_text().splitlines()
    assert lines[8].startswith("VECTORS velocity")
    assert len(lines) == 9 + 20 and lines[-1] == "0 0 0"
