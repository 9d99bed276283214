"""Synthetic twins and the verification drivers built on them.

A twin generates measurements with penalized "true" obstacles, then runs
the one-shot pipeline (obstacle-free forward run, adjoint, sensitivity,
clustering) and scores the clusters against the known truth. The rate
drivers sweep the penalty or the inclusion size and fit log-log slopes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import AdjointTrajectory, MeasurementSet, solve_adjoint
from .detection import DetectionReport, find_clusters, score, with_extents
from .grid import Grid, LayoutError, MaskField, ShapeSpec, _inside, build_grid, rasterize, union_mask, validate_layout
from .mac import build_operators
from .ns_solver import (
    BoundarySpec,
    ForcingSpec,
    ScalarField,
    SolverConfig,
    Stepper,
    Trajectory,
    gradient_sq,
    solve_forward,
    time_grid,
    trapezoid_weights,
)
from .sensitivity import SensitivityField, cost, discrete_kappa_gradient, topological_gradient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TwinSpec:
    grid: Grid
    solver: SolverConfig
    forcing: ForcingSpec
    boundary: BoundarySpec
    obstacles: tuple
    holdall: ShapeSpec
    windows: tuple
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "windows", tuple(self.windows))
        if not 0.0 <= self.sigma < 1.0:
            raise ValueError(f"noise level must lie in [0, 1), got {self.sigma}")
        if not self.windows:
            raise ValueError("at least one observation window is required")
        validate_layout(self.obstacles, self.windows, self.holdall, self.grid)

    def replace(self, **changes) -> "TwinSpec":
        return replace(self, **changes)

    def window_masks(self) -> list[MaskField]:
        return [rasterize(self.grid, w) for w in self.windows]

    def holdall_mask(self) -> MaskField:
        return rasterize(self.grid, self.holdall)

    def kappa(self) -> ScalarField:
        mask = union_mask(self.grid, self.obstacles, obstacle=True)
        return ScalarField.penalty(mask, self.solver.k_penalty)

    def times(self) -> np.ndarray:
        return time_grid(self.grid, self.solver, self.forcing, self.boundary)


def canonical_twin(obstacles=None, **changes) -> TwinSpec:
    """96 x 96 unit-square lid cavity with a centered hold-all and one window
    under the lid. The default obstacle is a box of half-width 0.03 at the center."""
    grid = build_grid(96, 96, 1.0, 1.0)
    if obstacles is None:
        obstacles = [ShapeSpec.box(0.5, 0.5, 0.03, 0.03)]
    spec = TwinSpec(
        grid=grid,
        solver=SolverConfig(nu=0.01, k_penalty=1e6, T=2.0),
        forcing=ForcingSpec(),
        boundary=BoundarySpec("lid", "top", lid_speed=1.0, t_ramp=0.1),
        obstacles=tuple(obstacles),
        holdall=ShapeSpec.box(0.5, 0.5, 0.25, 0.25),
        windows=(ShapeSpec.box(0.5, 0.87, 0.1, 0.1),),
    )
    return spec.replace(**changes) if changes else spec


def synth_measurements(spec: TwinSpec) -> MeasurementSet:
    """Window samples of the run with penalized true obstacles, plus relative
    Gaussian noise ``sigma * max|u_meas| * xi`` from ``default_rng(seed)``."""
    windows = spec.window_masks()
    traj = solve_forward(spec.solver, spec.kappa(), spec.forcing, spec.boundary, record=windows, times=spec.times())
    samples = traj.samples
    if spec.sigma > 0:
        rng = np.random.default_rng(spec.seed)
        scale = spec.sigma * max(float(np.abs(s).max()) for s in samples if s.size)
        samples = [s + scale * rng.standard_normal(s.shape) for s in samples]
    return MeasurementSet(windows, traj.times, samples, sigma=spec.sigma, seed=spec.seed)


@dataclass(eq=False)
class TwinResult:
    spec: TwinSpec
    meas: MeasurementSet
    u0: Trajectory = field(repr=False)
    v0: AdjointTrajectory = field(repr=False)
    dk: SensitivityField = field(repr=False)
    report: DetectionReport = None

    def cost0(self) -> float:
        return cost(self.u0, self.meas)


def run_twin(
    spec: TwinSpec,
    alpha: float = 0.5,
    beta: float = 0.5,
    match_radius: float | None = None,
    meas: MeasurementSet | None = None,
    keep_stars: bool = False,
    solver: SolverConfig | None = None,
) -> TwinResult:
    """Full one-shot pipeline. Clusters are searched inside the hold-all."""
    meas = meas if meas is not None else synth_measurements(spec)
    cfg = solver or spec.solver
    u0 = solve_forward(cfg, ScalarField.zeros(spec.grid), spec.forcing, spec.boundary, times=meas.times, keep_stars=keep_stars)
    v0 = solve_adjoint(u0, meas, cfg, spec.boundary)
    dk = topological_gradient(u0, v0)
    report = find_clusters(dk, alpha, region=spec.holdall_mask())
    with_extents(dk, report, beta)
    score(report, list(spec.obstacles), match_radius)
    report.seed = spec.seed
    report.sigma = spec.sigma
    return TwinResult(spec, meas, u0, v0, dk, report)


def run_detection(spec: TwinSpec, alpha: float = 0.5, beta: float = 0.5, match_radius: float | None = None) -> DetectionReport:
    return run_twin(spec, alpha, beta, match_radius).report


def nearest_distance(report: DetectionReport, center) -> float:
    """Distance from ``center`` to the closest cluster argmin (inf without clusters)."""
    if not report.clusters:
        return math.inf
    return min(math.hypot(c.center[0] - center[0], c.center[1] - center[1]) for c in report.clusters)


# --------------------------------------------------------------------------
# two-obstacle separation


def place_pair(base: TwinSpec, gap_cells: int) -> TwinSpec:
    """Move the two template obstacles along the line joining them so their
    facing edges are ``gap_cells`` cells apart; the midpoint is kept."""
    if len(base.obstacles) != 2:
        raise ValueError("separation template needs exactly two obstacles")
    a, b = base.obstacles
    if a.kind != b.kind or a.size != b.size:
        raise ValueError("template obstacles must be identical shapes")
    dx = b.center[0] - a.center[0]
    dy = b.center[1] - a.center[1]
    if (dx == 0) == (dy == 0):
        raise ValueError("template obstacles must be aligned with an axis")
    mx = 0.5 * (a.center[0] + b.center[0])
    my = 0.5 * (a.center[1] + b.center[1])
    if dx != 0:
        half = a.size[0] + 0.5 * gap_cells * base.grid.dx
        sign = math.copysign(1.0, dx)
        first = ShapeSpec(a.kind, (mx - sign * half, my), a.size)
        second = ShapeSpec(a.kind, (mx + sign * half, my), a.size)
    else:
        half = a.size[-1] + 0.5 * gap_cells * base.grid.dy
        sign = math.copysign(1.0, dy)
        first = ShapeSpec(a.kind, (mx, my - sign * half), a.size)
        second = ShapeSpec(a.kind, (mx, my + sign * half), a.size)
    return base.replace(obstacles=(first, second))


@dataclass
class SeparationRow:
    gap_cells: int
    clusters: int
    matched: int
    report: DetectionReport = field(repr=False)


def separation_study(base: TwinSpec, separations, alpha: float = 0.5, beta: float = 0.5) -> list[SeparationRow]:
    rows = []
    for d in separations:
        spec = place_pair(base, int(d))
        rep = run_detection(spec, alpha, beta)
        rows.append(SeparationRow(int(d), rep.n_detected, rep.scores.n_matched, rep))
        log.info("separation %d cells: %d clusters", d, rep.n_detected)
    return rows


# --------------------------------------------------------------------------
# rate fits


class RegimeError(RuntimeError):
    """A log-log fit whose residuals exceed the tolerance; ``result`` keeps the data."""

    def __init__(self, message: str, result: "RateResult"):
        super().__init__(message)
        self.result = result


@dataclass
class RateResult:
    params: np.ndarray
    norms: np.ndarray
    slope: float
    intercept: float
    residuals: np.ndarray

    def __post_init__(self):
        if len(self.params) < 4:
            raise ValueError("a rate fit needs at least four samples")
        d = np.diff(self.params)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("sampled parameters must be strictly monotone")

    @property
    def max_residual(self) -> float:
        return float(np.abs(self.residuals).max())

    def rows(self):
        return list(zip(self.params.tolist(), self.norms.tolist()))


def fit_rate(params, norms, max_residual: float = 0.3) -> RateResult:
    """Least-squares line through (log10 p, log10 norm); residuals in log10 units."""
    p = np.asarray(params, dtype=float)
    n = np.asarray(norms, dtype=float)
    if np.any(p <= 0) or np.any(n <= 0):
        raise ValueError("log-log fit needs positive parameters and norms")
    x, y = np.log10(p), np.log10(n)
    slope, intercept = np.polyfit(x, y, 1)
    res = RateResult(p, n, float(slope), float(intercept), y - (slope * x + intercept))
    if res.max_residual > max_residual:
        raise RegimeError(f"log-log residual {res.max_residual:.3f} exceeds {max_residual}", res)
    return res


def _window_norm(samples: list[np.ndarray], times: np.ndarray, grid: Grid) -> float:
    w = trapezoid_weights(times)
    total = sum(float(w @ (s**2).sum(axis=(1, 2))) for s in samples)
    return math.sqrt(total * grid.cell_volume)


def penalized_norm(cfg: SolverConfig, mask: MaskField, k: float, forcing: ForcingSpec, bc: BoundarySpec) -> float:
    """``||u^k||`` in L2((0, T) x mask) for the flow penalized with ``k`` on ``mask``."""
    kappa = ScalarField.penalty(mask, k)
    traj = solve_forward(cfg, kappa, forcing, bc, record=[mask])
    return _window_norm(traj.samples, traj.times, mask.grid)


def verify_penalization_rate(
    cfg: SolverConfig,
    mask: MaskField,
    k_values,
    forcing: ForcingSpec | None = None,
    bc: BoundarySpec | None = None,
    max_residual: float = 0.3,
) -> RateResult:
    ks = [float(k) for k in k_values]
    if len(ks) < 4 or math.log10(max(ks) / min(ks)) < 3 - 1e-12:
        raise ValueError("need at least four penalties spanning three decades")
    forcing = forcing or ForcingSpec()
    bc = bc or BoundarySpec("lid", t_ramp=0.1)
    norms = [penalized_norm(cfg, mask, k, forcing, bc) for k in ks]
    for k, n in zip(ks, norms):
        log.info("penalty %.3g: norm %.6g", k, n)
    return fit_rate(ks, norms, max_residual)


def inclusion(z, eps: float, shape: ShapeSpec) -> ShapeSpec:
    """``z + eps * C`` where ``shape`` (centered anywhere) supplies C."""
    return ShapeSpec(shape.kind, tuple(z), tuple(eps * s for s in shape.size))


def perturbation_norm(
    cfg: SolverConfig,
    u0: Trajectory,
    kappa: ScalarField,
    forcing: ForcingSpec,
    bc: BoundarySpec,
) -> float:
    """``max_t ||u_eps - u0||_{L2} + (int ||grad(u_eps - u0)||^2 dt)^{1/2}``.

    The perturbed run is marched alongside the stored ``u0`` so only one
    full trajectory is held in memory.
    """
    grid = u0.grid
    ops = build_operators(grid)
    stepper = Stepper(grid, kappa, forcing, bc, cfg)
    w = trapezoid_weights(u0.times)
    u = np.zeros(ops.n)
    linf = 0.0
    h1 = 0.0
    for n in range(len(u0.times)):
        if n > 0:
            u, _, _ = stepper.step(u, u0.times[n - 1], u0.times[n] - u0.times[n - 1], index=n - 1)
        e = u - u0.data[n]
        cx = ops.Cx @ e
        cy = ops.Cy @ e
        linf = max(linf, math.sqrt(float(cx @ cx + cy @ cy) * grid.cell_volume))
        h1 += w[n] * gradient_sq(grid, e)
    return linf + math.sqrt(h1)


def _check_inside(shape: ShapeSpec, holdall: ShapeSpec | None):
    if holdall is not None and not _inside(shape, holdall):
        raise LayoutError("obstacle-outside-holdall", f"inclusion {shape} leaves the hold-all")


def verify_perturbation_decay(
    cfg: SolverConfig,
    grid: Grid,
    z,
    eps_values,
    shape: ShapeSpec,
    forcing: ForcingSpec | None = None,
    bc: BoundarySpec | None = None,
    holdall: ShapeSpec | None = None,
    max_residual: float = 0.3,
) -> RateResult:
    """Norm of ``u_eps - u0`` for inclusions ``z + eps C`` penalized with
    ``cfg.k_penalty``, fitted against eps."""
    forcing = forcing or ForcingSpec()
    bc = bc or BoundarySpec("lid", t_ramp=0.1)
    shapes = [inclusion(z, e, shape) for e in eps_values]
    for s in shapes:
        _check_inside(s, holdall)
    u0 = solve_forward(cfg, ScalarField.zeros(grid), forcing, bc)
    norms = []
    for e, s in zip(eps_values, shapes):
        kappa = ScalarField.penalty(rasterize(grid, s, obstacle=True), cfg.k_penalty)
        norms.append(perturbation_norm(cfg, u0, kappa, forcing, bc))
        log.info("eps %.4g: perturbation norm %.6g", e, norms[-1])
    return fit_rate(eps_values, norms, max_residual)


@dataclass
class ExpansionRow:
    eps: float
    area: float
    cost: float
    ratio: float


@dataclass
class ExpansionTable:
    z: tuple[float, float]
    cell: tuple[int, int]
    dk_z: float
    cost0: float
    k: float
    rows: list[ExpansionRow]

    def rel_errors(self) -> list[float]:
        return [abs(r.ratio - self.dk_z) / abs(self.dk_z) for r in self.rows]


def verify_expansion(
    cfg: SolverConfig,
    twin: TwinResult,
    eps_values,
    shape: ShapeSpec,
    z=None,
) -> ExpansionTable:
    """``ratio_eps = (K(eps) - K(0)) / (k |C_eps|)`` against ``D_K(z)``.

    ``twin`` supplies the measurements and the sensitivity (computed with
    the same ``cfg``). ``z`` defaults to :func:`expansion_point`.
    ``|C_eps|`` is the rasterized area, so cell-aligned inclusions give
    exactly ``eps^2 |C|``.
    """
    spec = twin.spec
    grid = spec.grid
    if z is None:
        cell = expansion_point(twin, max(eps_values), shape)
        z = grid.center_of(*cell)
    else:
        cell = grid.cell_of(*z)
    windows = twin.meas.windows
    k0 = twin.cost0()
    rows = []
    for e in eps_values:
        s = inclusion(z, e, shape)
        _check_inside(s, spec.holdall)
        mask = rasterize(grid, s, obstacle=True)
        if mask.count == 0:
            raise ValueError(f"inclusion at eps={e} covers no cell")
        traj = solve_forward(cfg, ScalarField.penalty(mask, cfg.k_penalty), spec.forcing, spec.boundary, record=windows, times=twin.meas.times)
        ke = cost(traj, twin.meas)
        rows.append(ExpansionRow(float(e), mask.measure, ke, (ke - k0) / (cfg.k_penalty * mask.measure)))
        log.info("eps %.4g: ratio %.6g (D_K %.6g)", e, rows[-1].ratio, twin.dk.values[cell])
    return ExpansionTable(tuple(z), tuple(cell), float(twin.dk.values[cell]), k0, cfg.k_penalty, rows)


def expansion_point(twin: TwinResult, eps_max: float, shape: ShapeSpec) -> tuple[int, int]:
    """Cell of most negative D_K among centers where the largest inclusion
    still fits strictly inside the hold-all."""
    grid = twin.spec.grid
    v = np.where(twin.spec.holdall_mask().values, twin.dk.values, np.inf)
    for flat in np.argsort(v.T, axis=None, kind="stable"):
        j, i = divmod(int(flat), grid.nx)
        if not np.isfinite(v[i, j]):
            break
        if _inside(inclusion(grid.center_of(i, j), eps_max, shape), twin.spec.holdall):
            if v[i, j] >= 0:
                break
            return i, j
    raise ValueError("no cell with negative sensitivity admits the inclusion sweep")


@dataclass
class GradientCheck:
    cells: list
    a_values: list
    fd: np.ndarray  # (ncells, na)
    predicted: np.ndarray  # Vc * D_K(c)
    exact: np.ndarray  # derivative of the discrete cost
    cost0: float

    def errors_vs_sensitivity(self) -> np.ndarray:
        return _rel(self.fd, self.predicted[:, None])

    def errors_vs_exact(self) -> np.ndarray:
        return _rel(self.fd, self.exact[:, None])

    def max_error(self) -> float:
        """Max relative error against ``Vc D_K`` at the smallest ``a``."""
        i = int(np.argmin(self.a_values))
        return float(self.errors_vs_sensitivity()[:, i].max())


def _rel(a, b, floor: float = 1e-8):
    """Relative error; falls back to absolute when the reference is below ``floor``."""
    b = np.broadcast_to(b, a.shape)
    out = np.abs(a - b)
    big = np.abs(b) > floor
    out[big] /= np.abs(b[big])
    return out


def adjoint_gradient_check(cfg: SolverConfig, twin: TwinResult, cells, a_values) -> GradientCheck:
    """Finite-difference derivative of K along single-cell penalties."""
    spec = twin.spec
    grid = spec.grid
    wmask = np.zeros(grid.shape, bool)
    for w in twin.meas.windows:
        wmask |= w.values
    for i, j in cells:
        if not (0 < i < grid.nx - 1 and 0 < j < grid.ny - 1) or wmask[i, j]:
            raise ValueError(f"probe cell {(i, j)} must be interior and outside the windows")
    u0 = twin.u0
    if u0.stars is None:
        u0 = solve_forward(cfg, ScalarField.zeros(grid), spec.forcing, spec.boundary, times=twin.meas.times, keep_stars=True)
    exact_field = discrete_kappa_gradient(u0, twin.v0).values
    k0 = cost(twin.u0, twin.meas)
    fd = np.zeros((len(cells), len(a_values)))
    for ci, (i, j) in enumerate(cells):
        for ai, a in enumerate(a_values):
            kap = np.zeros(grid.shape)
            kap[i, j] = a
            traj = solve_forward(cfg, ScalarField(grid, kap), spec.forcing, spec.boundary, record=twin.meas.windows, times=twin.meas.times)
            fd[ci, ai] = (cost(traj, twin.meas) - k0) / a
    predicted = np.array([grid.cell_volume * twin.dk.values[i, j] for i, j in cells])
    exact = np.array([exact_field[i, j] for i, j in cells])
    return GradientCheck([tuple(c) for c in cells], list(a_values), fd, predicted, exact, k0)
