"""Acceptance suite on the 96 x 96 canonical lid-driven twin.

Each test records one PASS/FAIL line (see the summary at the end of the
pytest run). Criteria that fail for reasons analysed in the decisions
ledger are marked ``xfail(strict=True)``: they run at full tolerance and
pytest turns red if they ever start passing.
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from topoflow import experiments as ex
from topoflow.cli import main
from topoflow.grid import ShapeSpec, build_grid, rasterize
from topoflow.io import dump_config, load_config, parse_config, read_scalar_csv
from topoflow.mac import build_operators
from topoflow.ns_solver import (
    BoundarySpec,
    ForcingSpec,
    ScalarField,
    SolverConfig,
    Stepper,
    poisson_solve,
    solve_forward,
)

ROOT = Path(__file__).resolve().parents[1]
CANONICAL = ROOT / "configs" / "canonical.json"
H = 1 / 96
PROBES = [(40, 40), (56, 40), (48, 56), (64, 60), (30, 66)]
THREE = (ShapeSpec.box(0.375, 0.40, 0.03, 0.03), ShapeSpec.box(0.625, 0.40, 0.03, 0.03), ShapeSpec.box(0.5, 0.625, 0.03, 0.03))
PAIR = (ShapeSpec.box(0.4, 0.5, 2 * H, 2 * H), ShapeSpec.box(0.6, 0.5, 2 * H, 2 * H))
GAPS = (20, 10, 5, 3, 1)

pytestmark = pytest.mark.acceptance


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.s = time.perf_counter() - self.t0


@pytest.fixture(scope="module")
def spec():
    return ex.canonical_twin()


@pytest.fixture(scope="module")
def twin(spec):
    with Clock() as c:
        res = ex.run_twin(spec, keep_stars=True)
    res.seconds = c.s
    return res


def test_c01_zero_data_invariance(spec, verdict):
    with Clock() as c:
        traj = solve_forward(spec.solver, ScalarField.zeros(spec.grid), ForcingSpec(), BoundarySpec())
    zero = not traj.data.any()
    ok = verdict(1, zero and c.s < 5.0, f"all {len(traj)} snapshots zero={zero}, {c.s:.2f} s (limit 5 s)")
    assert ok


def test_c02_incompressibility(spec, verdict):
    cfg = SolverConfig(T=2.0, dt=1e-3)
    st = Stepper(spec.grid, None, ForcingSpec(), spec.boundary, cfg)
    u = np.zeros(st.ops.n)
    worst = 0.0
    with Clock() as c:
        for n in range(2000):
            u, _, _ = st.step(u, n * 1e-3, 1e-3, index=n)
            worst = max(worst, float(np.abs(st.ops.Div @ u).max()))
    ok = verdict(2, worst <= 1e-8 and c.s < 60.0, f"max|div u| over 2000 steps = {worst:.2e} (tol 1e-8), {c.s:.1f} s (limit 60 s)")
    assert ok


def _poisson_error(n):
    g = build_grid(n, n, 1.0, 1.0)
    x, y = g.cell_centers()
    p = np.cos(np.pi * x) * np.cos(np.pi * y)
    return np.abs(poisson_solve(ScalarField(g, 2 * np.pi**2 * p), SolverConfig()).field.values - p).max()


def test_c03_manufactured_poisson(verdict):
    ratio = _poisson_error(64) / _poisson_error(128)
    ok = verdict(3, 3.2 <= ratio <= 4.8, f"error ratio 64^2/128^2 = {ratio:.4f} (range [3.2, 4.8])")
    assert ok


@pytest.mark.xfail(strict=True, reason="drag-then-project splitting plateaus the interior norm; see decisions ledger")
def test_c04_penalization_rate(spec, verdict):
    mask = rasterize(spec.grid, spec.obstacles[0], obstacle=True)
    with Clock() as c:
        try:
            res = ex.verify_penalization_rate(spec.solver, mask, [1e2, 1e3, 1e4, 1e5, 1e6], spec.forcing, spec.boundary)
            fit_ok = True
        except ex.RegimeError as exc:
            res, fit_ok = exc.result, False
    norms = ", ".join(f"{v:.3g}" for v in res.norms)
    ok = verdict(
        4,
        fit_ok and -0.65 <= res.slope <= -0.35 and c.s < 600,
        f"slope {res.slope:.3f} (range [-0.65, -0.35]), norms [{norms}], max residual {res.max_residual:.2f}, {c.s:.0f} s",
    )
    assert ok


def test_c05_perturbation_decay(spec, verdict):
    cfg = replace(spec.solver, k_penalty=1.0)
    with Clock() as c:
        try:
            res = ex.verify_perturbation_decay(cfg, spec.grid, (0.5, 0.5), [8, 4, 2, 1], ShapeSpec.box(0, 0, H, H), spec.forcing, spec.boundary, spec.holdall)
            fit_ok = True
        except ex.RegimeError as exc:
            res, fit_ok = exc.result, False
    decreasing = bool(np.all(np.diff(res.norms) < 0))
    norms = ", ".join(f"{v:.4g}" for v in res.norms)
    ok = verdict(
        5,
        fit_ok and decreasing and res.slope > 1 and c.s < 600,
        f"norms over eps 8,4,2,1 cells [{norms}], strictly decreasing={decreasing}, slope {res.slope:.3f} (> 1), {c.s:.0f} s",
    )
    assert ok


def test_c06_adjoint_gradient(spec, twin, verdict):
    with Clock() as c:
        chk = ex.adjoint_gradient_check(spec.solver, twin, PROBES, [1e-1, 1e-2, 1e-3])
    vs_exact = chk.errors_vs_exact()
    monotone = bool(np.all(np.diff(vs_exact, axis=1) < 0))
    worst = chk.max_error()
    secs = c.s + twin.seconds
    seq = "; ".join(",".join(f"{e:.1e}" for e in row) for row in vs_exact)
    ok = verdict(
        6,
        worst <= 1e-2 and monotone and secs < 900,
        f"max rel error vs Vc*D_K at a=1e-3 = {worst:.2e} (tol 1e-2); remainder vs exact derivative monotone={monotone} [{seq}]; {secs:.0f} s",
    )
    assert ok


def test_c07_expansion_ratio(spec, twin, verdict):
    cfg = replace(spec.solver, k_penalty=1.0)
    with Clock() as c:
        tab = ex.verify_expansion(cfg, twin, [15, 7, 3, 1], ShapeSpec.box(0, 0, H / 2, H / 2))
    errs = tab.rel_errors()
    negative = all(r.ratio < 0 for r in tab.rows)
    ok = verdict(
        7,
        errs[-1] <= 0.2 and negative and c.s + twin.seconds < 900,
        f"cell {tab.cell}, D_K={tab.dk_z:.4g}, rel errors [{', '.join(f'{e:.3g}' for e in errs)}] (last <= 0.2), all ratios negative={negative}",
    )
    assert ok


@pytest.mark.xfail(strict=True, reason="D_K minimum sits on the window side of the hold-all; see decisions ledger")
def test_c08_single_obstacle(spec, twin, verdict):
    rep = twin.report
    d = ex.nearest_distance(rep, spec.obstacles[0].center) / H
    ok = verdict(
        8,
        rep.n_detected == 1 and d <= 2.0 and twin.seconds < 120,
        f"{rep.n_detected} cluster(s), argmins {[c.argmin for c in rep.clusters]}, distance {d:.1f} cells (<= 2), {twin.seconds:.1f} s",
    )
    assert ok


@pytest.mark.xfail(strict=True, reason="obstacles merge into one window-side cluster; see decisions ledger")
def test_c09_three_obstacles(spec, verdict):
    rep = ex.run_detection(spec.replace(obstacles=THREE))
    s = rep.scores
    ok = verdict(9, s.n_matched == 3 and not s.spurious, f"{rep.n_detected} cluster(s), {s.n_matched}/3 matched, {len(s.spurious)} spurious")
    assert ok


@pytest.mark.xfail(strict=True, reason="one cluster at every separation; see decisions ledger")
def test_c10_separation(spec, verdict):
    rows = ex.separation_study(spec.replace(obstacles=PAIR), GAPS)
    counts = [r.clusters for r in rows]
    ok = verdict(
        10,
        counts[0] == 2 and counts[-1] == 1 and all(a >= b for a, b in zip(counts, counts[1:])),
        f"clusters at gaps {list(GAPS)} cells: {counts} (want 2 first, 1 last, non-increasing)",
    )
    assert ok


def test_c11_noise_robustness(spec, twin, verdict):
    center = spec.obstacles[0].center
    d0 = ex.nearest_distance(twin.report, center) / H
    dist = {}
    for sigma in (0.01, 0.05):
        rep = ex.run_detection(spec.replace(sigma=sigma, seed=2024))
        dist[sigma] = ex.nearest_distance(rep, center) / H
    again = ex.run_twin(spec.replace(sigma=0.05, seed=2024))
    first = ex.run_twin(spec.replace(sigma=0.05, seed=2024))
    same = json.dumps(again.report.to_dict()) == json.dumps(first.report.to_dict()) and np.array_equal(again.dk.values, first.dk.values)
    degrade = max(dist.values()) - d0
    finite = math.isfinite(d0) and all(math.isfinite(v) for v in dist.values())
    ok = verdict(
        11,
        finite and degrade <= 2.0 and same,
        f"nearest-cluster distance {d0:.1f} cells at sigma=0, {dist[0.01]:.1f} at 0.01, {dist[0.05]:.1f} at 0.05 "
        f"(degradation {degrade:.1f} <= 2); repeated seed bit-identical={same}",
    )
    assert ok


def test_c12_determinism_and_round_trips(tmp_path, verdict):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["detect", "--config", str(CANONICAL), "--out", str(o)]) for o in outs]
    names = ("dk.csv", "dk.vtk", "report.json")
    identical = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    cfg = load_config(CANONICAL)
    g = cfg.twin.grid
    res = ex.run_twin(cfg.twin)
    csv_exact = np.array_equal(read_scalar_csv(outs[0] / "dk.csv", g).values, res.dk.values)
    text = dump_config(cfg)
    cfg_exact = dump_config(parse_config(text)) == text and parse_config(text).twin == cfg.twin
    saved = (outs[0] / "config.json").read_text()
    saved_ok = load_config(outs[0] / "config.json").twin == cfg.twin and dump_config(parse_config(saved)) == saved
    ok = verdict(
        12,
        codes == [0, 0] and identical and csv_exact and cfg_exact and saved_ok,
        f"exit codes {codes}, repeated detect bit-identical={identical}, csv round-trip exact={csv_exact}, "
        f"config round-trip exact={cfg_exact and saved_ok}",
    )
    assert ok
