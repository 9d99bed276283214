"""Run configuration (strict JSON), field export and report serialization."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detection import DetectionReport
from .experiments import TwinSpec
from .grid import Grid, ShapeSpec, build_grid
from .ns_solver import BoundarySpec, ForcingSpec, ScalarField, SolverConfig, StaggeredVelocity


class ConfigError(ValueError):
    """Malformed or invalid configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None, column: int | None = None):
        where = f"{key}: " if key else ""
        pos = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{where}{message}{pos}")
        self.key = key
        self.line = line
        self.column = column


# --------------------------------------------------------------------------
# study parameters


@dataclass(frozen=True)
class PenalizationStudy:
    k_values: tuple = (1e2, 1e3, 1e4, 1e5, 1e6)


@dataclass(frozen=True)
class DecayStudy:
    k_penalty: float = 1.0
    eps_values: tuple = (8.0, 4.0, 2.0, 1.0)
    shape: ShapeSpec | None = None  # unit inclusion C; default: 2 x 2-cell box
    z: tuple | None = None  # default: hold-all center


@dataclass(frozen=True)
class ExpansionStudy:
    k_penalty: float = 1.0
    eps_values: tuple = (15.0, 7.0, 3.0, 1.0)
    shape: ShapeSpec | None = None  # default: one-cell box
    z: tuple | None = None  # default: deepest cluster of the twin


@dataclass(frozen=True)
class AdjointStudy:
    cells: tuple = ()  # default: five cells picked inside the hold-all
    a_values: tuple = (1e-1, 1e-2, 1e-3)


@dataclass(frozen=True)
class SeparationStudy:
    gaps: tuple = (20, 10, 5, 3, 1)


@dataclass(frozen=True)
class Studies:
    penalization: PenalizationStudy = PenalizationStudy()
    decay: DecayStudy = DecayStudy()
    expansion: ExpansionStudy = ExpansionStudy()
    adjoint: AdjointStudy = AdjointStudy()
    separation: SeparationStudy = SeparationStudy()


@dataclass(frozen=True)
class RunConfig:
    twin: TwinSpec
    alpha: float = 0.5
    beta: float = 0.5
    match_radius: float | None = None
    out_dir: str = "out"
    export_csv: bool = True
    export_vtk: bool = True
    export_full: bool = False
    studies: Studies = field(default_factory=Studies)

    @property
    def grid(self) -> Grid:
        return self.twin.grid


# --------------------------------------------------------------------------
# schema helpers


def _obj(d, key, allowed, required=()):
    if not isinstance(d, dict):
        raise ConfigError("expected an object", key)
    for k in d:
        if k not in allowed:
            raise ConfigError("unknown key", f"{key}.{k}" if key else k)
    for k in required:
        if k not in d:
            raise ConfigError("missing required key", f"{key}.{k}" if key else k)
    return d


def _num(d, k, key, default=None, positive=False, nonneg=False, integer=False, nullable=False):
    path = f"{key}.{k}" if key else k
    if k not in d:
        return default
    v = d[k]
    if v is None and nullable:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError("expected a number", path)
    if integer and (not isinstance(v, int)):
        raise ConfigError("expected an integer", path)
    if not math.isfinite(v):
        raise ConfigError("must be finite", path)
    if positive and not v > 0:
        raise ConfigError("must be positive", path)
    if nonneg and v < 0:
        raise ConfigError("must be non-negative", path)
    return v if integer else float(v)


def _bool(d, k, key, default):
    if k not in d:
        return default
    if not isinstance(d[k], bool):
        raise ConfigError("expected true or false", f"{key}.{k}")
    return d[k]


def _str(d, k, key, default, choices):
    if k not in d:
        return default
    v = d[k]
    if v not in choices:
        raise ConfigError(f"expected one of {', '.join(choices)}", f"{key}.{k}")
    return v


def _pair(d, k, key, default=None):
    if k not in d:
        return default
    v = d[k]
    path = f"{key}.{k}"
    if not isinstance(v, list) or len(v) != 2:
        raise ConfigError("expected a two-element list", path)
    return tuple(_num({"v": x}, "v", path) for x in v)


def _list_of_numbers(d, k, key, default, positive=True):
    if k not in d:
        return default
    v = d[k]
    path = f"{key}.{k}"
    if not isinstance(v, list) or not v:
        raise ConfigError("expected a non-empty list", path)
    return tuple(_num({"v": x}, "v", f"{path}[{i}]", positive=positive) for i, x in enumerate(v))


_INDEX_BOX = re.compile(r"^\s*\(?\s*(\d+)\s*:\s*(\d+)\s*\)?\s*(?:,|x|×)\s*\(?\s*(\d+)\s*:\s*(\d+)\s*\)?\s*$")


def index_box(text: str, grid: Grid, key: str = "cells") -> ShapeSpec:
    """Grid-index box ``"i0:i1, j0:j1"`` covering ``[i0 dx, i1 dx] x [j0 dy, j1 dy]``.

    Parentheses and a ``x`` or multiplication-sign separator are accepted,
    so ``"(201:205) x (271:275)"`` parses too.
    """
    m = _INDEX_BOX.match(text)
    if not m:
        raise ConfigError("expected a grid-index box 'i0:i1, j0:j1'", key)
    i0, i1, j0, j1 = (int(g) for g in m.groups())
    if not (i0 < i1 <= grid.nx and j0 < j1 <= grid.ny):
        raise ConfigError("grid-index box is empty or outside the grid", key)
    return ShapeSpec.box(
        0.5 * (i0 + i1) * grid.dx, 0.5 * (j0 + j1) * grid.dy, 0.5 * (i1 - i0) * grid.dx, 0.5 * (j1 - j0) * grid.dy
    )


def _shape(d, key, grid: Grid) -> ShapeSpec:
    if isinstance(d, str):
        return index_box(d, grid, key)
    _obj(d, key, {"kind", "center", "radius", "half_widths", "cells"}, ("kind",))
    kind = _str(d, "kind", key, None, ("disk", "box"))
    if "cells" in d:
        if kind != "box" or set(d) != {"kind", "cells"}:
            raise ConfigError("'cells' is only valid alone on a box", f"{key}.cells")
        if not isinstance(d["cells"], str):
            raise ConfigError("expected a string", f"{key}.cells")
        return index_box(d["cells"], grid, f"{key}.cells")
    if "center" not in d:
        raise ConfigError("missing required key", f"{key}.center")
    center = _pair(d, "center", key)
    if kind == "disk":
        _obj(d, key, {"kind", "center", "radius"}, ("radius",))
        return ShapeSpec.disk(*center, _num(d, "radius", key, positive=True))
    _obj(d, key, {"kind", "center", "half_widths"}, ("half_widths",))
    a, b = _pair(d, "half_widths", key)
    if not (a > 0 and b > 0):
        raise ConfigError("must be positive", f"{key}.half_widths")
    return ShapeSpec.box(*center, a, b)


def _shape_list(doc, k, grid, required=True):
    if k not in doc:
        if required:
            raise ConfigError("missing required key", k)
        return ()
    v = doc[k]
    if not isinstance(v, list):
        raise ConfigError("expected a list", k)
    if required and not v:
        raise ConfigError("needs at least one entry", k)
    return tuple(_shape(s, f"{k}[{i}]", grid) for i, s in enumerate(v))


def default_holdall(obstacles, grid: Grid) -> ShapeSpec:
    """Smallest box around the obstacles, padded by two cells."""
    if not obstacles:
        raise ConfigError("a hold-all is required when there are no obstacles", "holdall")
    b = np.array([o.bounds() for o in obstacles])
    xmin, xmax = b[:, 0].min() - 2 * grid.dx, b[:, 1].max() + 2 * grid.dx
    ymin, ymax = b[:, 2].min() - 2 * grid.dy, b[:, 3].max() + 2 * grid.dy
    return ShapeSpec.box(0.5 * (xmin + xmax), 0.5 * (ymin + ymax), 0.5 * (xmax - xmin), 0.5 * (ymax - ymin))


TOP_KEYS = {"grid", "solver", "forcing", "boundary", "obstacles", "holdall", "windows", "noise", "detection", "output", "studies"}


def _parse_grid(doc) -> Grid:
    g = _obj(doc.get("grid"), "grid", {"nx", "ny", "lx", "ly"}, ("nx", "ny"))
    nx = _num(g, "nx", "grid", integer=True, positive=True)
    ny = _num(g, "ny", "grid", integer=True, positive=True)
    if nx < 4 or ny < 4:
        raise ConfigError("grid needs at least 4 cells per direction", "grid")
    return build_grid(nx, ny, _num(g, "lx", "grid", 1.0, positive=True), _num(g, "ly", "grid", 1.0, positive=True))


def _parse_solver(doc) -> SolverConfig:
    s = _obj(doc.get("solver", {}), "solver", {f for f in SolverConfig.__dataclass_fields__})
    d = SolverConfig()
    cfg = dict(
        nu=_num(s, "nu", "solver", d.nu, positive=True),
        k_penalty=_num(s, "k_penalty", "solver", d.k_penalty, nonneg=True),
        T=_num(s, "T", "solver", d.T, positive=True),
        dt=_num(s, "dt", "solver", d.dt, positive=True, nullable=True),
        cfl_safety=_num(s, "cfl_safety", "solver", d.cfl_safety, positive=True),
        poisson_method=_str(s, "poisson_method", "solver", d.poisson_method, ("dct", "cg")),
        poisson_tol=_num(s, "poisson_tol", "solver", d.poisson_tol, positive=True),
        poisson_max_iter=_num(s, "poisson_max_iter", "solver", d.poisson_max_iter, positive=True, integer=True),
        div_tol=_num(s, "div_tol", "solver", d.div_tol, positive=True),
    )
    if cfg["cfl_safety"] > 1:
        raise ConfigError("must lie in (0, 1]", "solver.cfl_safety")
    return SolverConfig(**cfg)


def _parse_forcing(doc) -> ForcingSpec:
    f = _obj(doc.get("forcing", {}), "forcing", {"kind", "magnitude", "direction", "wavenumbers"})
    wn = (1, 1)
    if "wavenumbers" in f:
        v = f["wavenumbers"]
        if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in v)):
            raise ConfigError("expected two positive integers", "forcing.wavenumbers")
        wn = tuple(v)
    return ForcingSpec(
        kind=_str(f, "kind", "forcing", "zero", ("zero", "constant-vector", "analytic-vortex")),
        magnitude=_num(f, "magnitude", "forcing", 0.0),
        direction=_pair(f, "direction", "forcing", (1.0, 0.0)),
        wavenumbers=wn,
    )


def _parse_boundary(doc) -> BoundarySpec:
    b = _obj(doc.get("boundary", {}), "boundary", {"kind", "lid_side", "lid_speed", "t_ramp"})
    return BoundarySpec(
        kind=_str(b, "kind", "boundary", "lid", ("no-slip", "lid")),
        lid_side=_str(b, "lid_side", "boundary", "top", ("top", "bottom", "left", "right")),
        lid_speed=_num(b, "lid_speed", "boundary", 1.0),
        t_ramp=_num(b, "t_ramp", "boundary", 0.1, nonneg=True),
    )


def _parse_studies(doc, grid) -> Studies:
    s = _obj(doc.get("studies", {}), "studies", {"penalization", "decay", "expansion", "adjoint", "separation"})
    p = _obj(s.get("penalization", {}), "studies.penalization", {"k_values"})
    pen = PenalizationStudy(_list_of_numbers(p, "k_values", "studies.penalization", PenalizationStudy.k_values))

    def inclusion_study(name, cls):
        key = f"studies.{name}"
        d = _obj(s.get(name, {}), key, {"k_penalty", "eps_values", "shape", "z"})
        base = cls()
        return cls(
            k_penalty=_num(d, "k_penalty", key, base.k_penalty, positive=True),
            eps_values=_list_of_numbers(d, "eps_values", key, base.eps_values),
            shape=_shape(d["shape"], f"{key}.shape", grid) if "shape" in d else None,
            z=_pair(d, "z", key),
        )

    a = _obj(s.get("adjoint", {}), "studies.adjoint", {"cells", "a_values"})
    cells = ()
    if "cells" in a:
        v = a["cells"]
        ok = isinstance(v, list) and all(
            isinstance(c, list) and len(c) == 2 and all(isinstance(x, int) and not isinstance(x, bool) for x in c) for c in v
        )
        if not ok:
            raise ConfigError("expected a list of [i, j] integer pairs", "studies.adjoint.cells")
        cells = tuple(tuple(c) for c in v)
    sep = _obj(s.get("separation", {}), "studies.separation", {"gaps"})
    gaps = SeparationStudy.gaps
    if "gaps" in sep:
        v = sep["gaps"]
        if not (isinstance(v, list) and v and all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in v)):
            raise ConfigError("expected a non-empty list of non-negative integers", "studies.separation.gaps")
        gaps = tuple(v)
    return Studies(
        penalization=pen,
        decay=inclusion_study("decay", DecayStudy),
        expansion=inclusion_study("expansion", ExpansionStudy),
        adjoint=AdjointStudy(cells, _list_of_numbers(a, "a_values", "studies.adjoint", AdjointStudy.a_values)),
        separation=SeparationStudy(gaps),
    )


def config_from_dict(doc) -> RunConfig:
    _obj(doc, "", TOP_KEYS, ("grid", "windows"))
    grid = _parse_grid(doc)
    obstacles = _shape_list(doc, "obstacles", grid, required=False)
    windows = _shape_list(doc, "windows", grid)
    holdall = _shape(doc["holdall"], "holdall", grid) if "holdall" in doc else default_holdall(obstacles, grid)
    n = _obj(doc.get("noise", {}), "noise", {"sigma", "seed"})
    sigma = _num(n, "sigma", "noise", 0.0, nonneg=True)
    if sigma >= 1:
        raise ConfigError("must be below 1", "noise.sigma")
    seed = _num(n, "seed", "noise", 0, integer=True, nonneg=True)
    d = _obj(doc.get("detection", {}), "detection", {"alpha", "beta", "match_radius"})
    alpha = _num(d, "alpha", "detection", 0.5, positive=True)
    beta = _num(d, "beta", "detection", 0.5, positive=True)
    for name, v in (("alpha", alpha), ("beta", beta)):
        if v > 1:
            raise ConfigError("must lie in (0, 1]", f"detection.{name}")
    o = _obj(doc.get("output", {}), "output", {"dir", "csv", "vtk", "full_trajectory"})
    out_dir = o.get("dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("expected a non-empty string", "output.dir")
    solver = _parse_solver(doc)
    try:
        twin = TwinSpec(grid, solver, _parse_forcing(doc), _parse_boundary(doc), obstacles, holdall, windows, sigma, seed)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), getattr(exc, "code", None)) from exc
    return RunConfig(
        twin=twin,
        alpha=alpha,
        beta=beta,
        match_radius=_num(d, "match_radius", "detection", None, positive=True, nullable=True),
        out_dir=out_dir,
        export_csv=_bool(o, "csv", "output", True),
        export_vtk=_bool(o, "vtk", "output", True),
        export_full=_bool(o, "full_trajectory", "output", False),
        studies=_parse_studies(doc, grid),
    )


def parse_config(text) -> RunConfig:
    """Parse and validate a UTF-8 JSON run configuration."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"not valid UTF-8 ({exc.reason})") from exc
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno, column=exc.colno) from exc
    return config_from_dict(doc)


def _reject_constant(name):
    raise ConfigError(f"{name} is not a valid number")


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_bytes())


# --------------------------------------------------------------------------
# canonical serialization


def shape_to_dict(s: ShapeSpec) -> dict:
    if s.kind == "disk":
        return {"kind": "disk", "center": list(s.center), "radius": s.size[0]}
    return {"kind": "box", "center": list(s.center), "half_widths": list(s.size)}


def config_to_dict(cfg: RunConfig) -> dict:
    t = cfg.twin
    st = cfg.studies

    def inc(s):
        d = {"k_penalty": s.k_penalty, "eps_values": list(s.eps_values)}
        if s.shape is not None:
            d["shape"] = shape_to_dict(s.shape)
        if s.z is not None:
            d["z"] = list(s.z)
        return d

    sc = t.solver
    return {
        "grid": {"nx": t.grid.nx, "ny": t.grid.ny, "lx": t.grid.lx, "ly": t.grid.ly},
        "solver": {
            "nu": sc.nu,
            "k_penalty": sc.k_penalty,
            "T": sc.T,
            "dt": sc.dt,
            "cfl_safety": sc.cfl_safety,
            "poisson_method": sc.poisson_method,
            "poisson_tol": sc.poisson_tol,
            "poisson_max_iter": sc.poisson_max_iter,
            "div_tol": sc.div_tol,
        },
        "forcing": {
            "kind": t.forcing.kind,
            "magnitude": t.forcing.magnitude,
            "direction": list(t.forcing.direction),
            "wavenumbers": list(t.forcing.wavenumbers),
        },
        "boundary": {
            "kind": t.boundary.kind,
            "lid_side": t.boundary.lid_side,
            "lid_speed": t.boundary.lid_speed,
            "t_ramp": t.boundary.t_ramp,
        },
        "obstacles": [shape_to_dict(s) for s in t.obstacles],
        "holdall": shape_to_dict(t.holdall),
        "windows": [shape_to_dict(s) for s in t.windows],
        "noise": {"sigma": t.sigma, "seed": t.seed},
        "detection": {"alpha": cfg.alpha, "beta": cfg.beta, "match_radius": cfg.match_radius},
        "output": {"dir": cfg.out_dir, "csv": cfg.export_csv, "vtk": cfg.export_vtk, "full_trajectory": cfg.export_full},
        "studies": {
            "penalization": {"k_values": list(st.penalization.k_values)},
            "decay": inc(st.decay),
            "expansion": inc(st.expansion),
            "adjoint": {"cells": [list(c) for c in st.adjoint.cells], "a_values": list(st.adjoint.a_values)},
            "separation": {"gaps": list(st.separation.gaps)},
        },
    }


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# field export


def _fmt(v: float) -> str:
    return "%.17g" % v


def export_scalar_csv(f: ScalarField, path) -> None:
    """Header ``i,j,x,y,value``; rows with j outer; 17 significant digits."""
    g = f.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "x", "y", "value"])
        for j in range(g.ny):
            y = _fmt((j + 0.5) * g.dy)
            for i in range(g.nx):
                w.writerow([i, j, _fmt((i + 0.5) * g.dx), y, _fmt(float(f.values[i, j]))])


def read_scalar_csv(path, grid: Grid) -> ScalarField:
    values = np.full(grid.shape, np.nan)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["i", "j", "x", "y", "value"]:
            raise ValueError(f"unexpected header {header}")
        for row in r:
            values[int(row[0]), int(row[1])] = float(row[4])
    if np.isnan(values).any():
        raise ValueError("csv does not cover every cell")
    return ScalarField(grid, values)


def export_vtk(obj, path, name: str | None = None) -> None:
    """Legacy ASCII VTK on the lattice of cell centers.

    Scalar fields are written as SCALARS, velocities as center-averaged
    VECTORS with a zero third component.
    """
    g = obj.grid
    if isinstance(obj, StaggeredVelocity):
        cx, cy = obj.centers()
        body = [f"VECTORS {name or 'velocity'} double"]
        body += [f"{_fmt(cx[i, j])} {_fmt(cy[i, j])} 0" for j in range(g.ny) for i in range(g.nx)]
    else:
        v = obj.values
        body = [f"SCALARS {name or 'value'} double 1", "LOOKUP_TABLE default"]
        body += [_fmt(float(v[i, j])) for j in range(g.ny) for i in range(g.nx)]
    head = [
        "# vtk DataFile Version 3.0",
        f"{name or 'field'} on a {g.nx}x{g.ny} grid",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {g.nx} {g.ny} 1",
        f"ORIGIN {_fmt(0.5 * g.dx)} {_fmt(0.5 * g.dy)} 0",
        f"SPACING {_fmt(g.dx)} {_fmt(g.dy)} 1",
        f"POINT_DATA {g.nx * g.ny}",
    ]
    Path(path).write_text("\n".join(head + body) + "\n")


def report_to_json(report: DetectionReport, extra: dict | None = None) -> str:
    d = report.to_dict()
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(report: DetectionReport, path, extra: dict | None = None) -> None:
    Path(path).write_text(report_to_json(report, extra))


def write_rows(path, header, rows, footer: list[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, float) else x for x in row])
        for line in footer or []:
            fh.write(line + "\n")
