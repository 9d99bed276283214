"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure, 3 I/O failure. Messages go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .grid import LayoutError, ShapeSpec, rasterize
from .io import (
    ConfigError,
    RunConfig,
    dump_config,
    export_scalar_csv,
    export_vtk,
    load_config,
    write_report,
    write_rows,
)
from .ns_solver import ScalarField, SolverError, StaggeredVelocity, divergence, solve_forward

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _sigma(text: str) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError("noise level must lie in [0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=_u64, help="noise seed (overrides noise.seed)")
    common.add_argument("--noise", type=_sigma, help="relative noise level (overrides noise.sigma)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="topoflow", description="One-shot obstacle detection from interior velocity data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("forward", parents=[common], help="run the forward solver with the true obstacles")
    sub.add_parser("synth", parents=[common], help="generate synthetic window measurements")
    sub.add_parser("detect", parents=[common], help="one-shot detection and report")
    v = sub.add_parser("verify", parents=[common], help="rate and consistency drivers")
    v.add_argument("check", choices=["penalization", "decay", "expansion", "adjoint"])
    sub.add_parser("separation", parents=[common], help="two-obstacle separation study")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    twin = cfg.twin
    if args.seed is not None:
        twin = twin.replace(seed=args.seed)
    if args.noise is not None:
        twin = twin.replace(sigma=args.noise)
    return replace(cfg, twin=twin, out_dir=args.out or cfg.out_dir)


def cmd_forward(cfg: RunConfig, out: Path) -> None:
    t = cfg.twin
    traj = solve_forward(t.solver, t.kappa(), t.forcing, t.boundary, times=t.times())
    final = traj.snapshot(len(traj) - 1)
    write_rows(out / "energy.csv", ["n", "t", "energy"], [(n, float(tt), float(e)) for n, (tt, e) in enumerate(zip(traj.times, traj.energy))])
    if cfg.export_vtk:
        export_vtk(final, out / "velocity.vtk", "velocity")
    if cfg.export_full:
        np.savez_compressed(out / "trajectory.npz", times=traj.times, data=traj.data)
    summary = {
        "steps": traj.nsteps,
        "dt": float(traj.times[1] - traj.times[0]),
        "final_energy": float(traj.energy[-1]),
        "final_max_divergence": float(np.abs(divergence(final).values).max()),
        "final_max_velocity": final.max_abs(),
    }
    (out / "forward.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    meas = ex.synth_measurements(cfg.twin)
    arrays = {"times": meas.times}
    for w, s in enumerate(meas.samples):
        arrays[f"window{w}"] = s
        arrays[f"window{w}_cells"] = np.argwhere(meas.windows[w].values)
    np.savez(out / "measurements.npz", **arrays)
    summary = {"sigma": meas.sigma, "seed": meas.seed, "samples": meas.sample_count, "max_abs": meas.max_abs()}
    (out / "measurements.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_detect(cfg: RunConfig, out: Path) -> None:
    res = ex.run_twin(cfg.twin, cfg.alpha, cfg.beta, cfg.match_radius)
    if cfg.export_csv:
        export_scalar_csv(res.dk.field, out / "dk.csv")
    if cfg.export_vtk:
        export_vtk(res.dk.field, out / "dk.vtk", "dk")
    write_report(res.report, out / "report.json", {"cost": res.cost0()})


def _inclusion_shape(shape: ShapeSpec | None, cells: float, grid) -> ShapeSpec:
    if shape is not None:
        return shape
    return ShapeSpec.box(0.0, 0.0, cells * grid.dx, cells * grid.dy)


def cmd_verify(cfg: RunConfig, out: Path, check: str) -> None:
    t = cfg.twin
    g = t.grid
    st = cfg.studies
    if check == "penalization":
        if not t.obstacles:
            raise ConfigError("the penalization check needs at least one obstacle", "obstacles")
        mask = rasterize(g, t.obstacles[0], obstacle=True)
        _rate(out / "penalization_rate.csv", "k", ex.verify_penalization_rate, t.solver, mask, st.penalization.k_values, t.forcing, t.boundary)
    elif check == "decay":
        d = st.decay
        shape = _inclusion_shape(d.shape, 1.0, g)
        z = d.z or t.holdall.center
        cfg_d = replace(t.solver, k_penalty=d.k_penalty)
        _rate(out / "decay_rate.csv", "eps", ex.verify_perturbation_decay, cfg_d, g, z, d.eps_values, shape, t.forcing, t.boundary, t.holdall)
    elif check == "expansion":
        e = st.expansion
        shape = _inclusion_shape(e.shape, 0.5, g)
        twin = ex.run_twin(t, cfg.alpha, cfg.beta, cfg.match_radius)
        tab = ex.verify_expansion(replace(t.solver, k_penalty=e.k_penalty), twin, e.eps_values, shape, e.z)
        rows = [(r.eps, r.area, r.cost, r.ratio, err) for r, err in zip(tab.rows, tab.rel_errors())]
        write_rows(
            out / "expansion.csv",
            ["eps", "area", "cost", "ratio", "rel_error"],
            rows,
            [f"# z={tab.z[0]!r},{tab.z[1]!r} cell={tab.cell[0]},{tab.cell[1]} dk_z={tab.dk_z!r} cost0={tab.cost0!r} k={tab.k!r}"],
        )
    else:
        a = st.adjoint
        twin = ex.run_twin(t, cfg.alpha, cfg.beta, cfg.match_radius, keep_stars=True)
        cells = list(a.cells) or default_probe_cells(cfg)
        chk = ex.adjoint_gradient_check(t.solver, twin, cells, a.a_values)
        errs = chk.errors_vs_sensitivity()
        rows = []
        for ci, c in enumerate(chk.cells):
            for ai, av in enumerate(chk.a_values):
                rows.append((c[0], c[1], float(av), float(chk.fd[ci, ai]), float(chk.predicted[ci]), float(chk.exact[ci]), float(errs[ci, ai])))
        write_rows(
            out / "adjoint_check.csv",
            ["i", "j", "a", "fd", "predicted", "exact", "rel_error"],
            rows,
            [f"# max_rel_error={chk.max_error()!r}"],
        )


def default_probe_cells(cfg: RunConfig) -> list[tuple[int, int]]:
    """Five hold-all cells: the center and four points halfway to its corners."""
    hx, hy = cfg.twin.holdall.center
    xmin, xmax, ymin, ymax = cfg.twin.holdall.bounds()
    g = cfg.twin.grid
    pts = [(hx, hy)] + [(0.5 * (hx + x), 0.5 * (hy + y)) for x in (xmin, xmax) for y in (ymin, ymax)]
    return [g.cell_of(x, y) for x, y in pts]


def _rate(path: Path, name: str, driver, *args) -> None:
    """Run a rate driver; the table is written even when the fit is rejected."""
    try:
        res = driver(*args)
    except ex.RegimeError as exc:
        _write_rate(path, name, exc.result)
        raise
    _write_rate(path, name, res)


def _write_rate(path: Path, name: str, res: ex.RateResult) -> None:
    write_rows(
        path,
        [name, "norm"],
        [(float(p), float(n)) for p, n in res.rows()],
        [f"# slope={res.slope!r} intercept={res.intercept!r} max_residual={res.max_residual!r}"],
    )


def cmd_separation(cfg: RunConfig, out: Path) -> None:
    rows = ex.separation_study(cfg.twin, cfg.studies.separation.gaps, cfg.alpha, cfg.beta)
    write_rows(out / "separation.csv", ["gap_cells", "clusters", "matched"], [(r.gap_cells, r.clusters, r.matched) for r in rows])


def _run(args) -> None:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise _IOFailure(f"cannot read config: {exc}") from exc
    cfg = _apply_overrides(cfg, args)
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(dump_config(cfg))
    except OSError as exc:
        raise _IOFailure(f"cannot write to {out}: {exc}") from exc
    cmd = args.command
    try:
        if cmd == "forward":
            cmd_forward(cfg, out)
        elif cmd == "synth":
            cmd_synth(cfg, out)
        elif cmd == "detect":
            cmd_detect(cfg, out)
        elif cmd == "verify":
            cmd_verify(cfg, out, args.check)
        else:
            cmd_separation(cfg, out)
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc


class _IOFailure(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except (ConfigError, LayoutError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ex.RegimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SolverError, FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
