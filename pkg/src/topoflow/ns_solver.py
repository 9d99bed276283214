"""Penalized incompressible Navier-Stokes on the MAC grid.

One time step (forward Euler, fixed dt):

    u*  = u + dt * (-A(u) u + nu * Lap u + g)        explicit skew advection + diffusion
    u** = u* / (1 + dt * kappa_face)                 implicit Brinkman drag
    u'  = u** - Grad phi,  Div Grad phi = Div u**     projection, pressure = phi / dt

``kappa = 0`` gives the obstacle-free background flow; ``kappa = k * chi``
models a rigid obstacle by volume penalization.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .grid import Grid, MaskField
from .mac import MacOperators, advection, build_operators, wall_terms

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Numerical failure in a time loop; ``step`` is the failing time index."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class CFLViolation(SolverError):
    pass


class BlowUp(SolverError):
    pass


class PoissonNotConverged(SolverError):
    pass


# --------------------------------------------------------------------------
# field containers


@dataclass(frozen=True, eq=False)
class StaggeredVelocity:
    grid: Grid
    ux: np.ndarray = field(repr=False)  # (nx+1, ny)
    uy: np.ndarray = field(repr=False)  # (nx, ny+1)

    def __post_init__(self):
        g = self.grid
        if self.ux.shape != (g.nx + 1, g.ny) or self.uy.shape != (g.nx, g.ny + 1):
            raise ValueError("velocity arrays do not match the grid staggering")

    @classmethod
    def zeros(cls, grid: Grid) -> "StaggeredVelocity":
        return cls(grid, np.zeros((grid.nx + 1, grid.ny)), np.zeros((grid.nx, grid.ny + 1)))

    @classmethod
    def from_packed(cls, grid: Grid, u: np.ndarray) -> "StaggeredVelocity":
        ux, uy = build_operators(grid).unpack(u)
        return cls(grid, ux, uy)

    def packed(self) -> np.ndarray:
        """Interior faces only; wall-normal values are discarded."""
        return build_operators(self.grid).pack(self.ux, self.uy)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return 0.5 * (self.ux[:-1] + self.ux[1:]), 0.5 * (self.uy[:, :-1] + self.uy[:, 1:])

    def max_abs(self) -> float:
        return float(max(np.abs(self.ux).max(), np.abs(self.uy).max()))


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray = field(repr=False)  # (nx, ny)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"field shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def penalty(cls, mask: MaskField, k: float) -> "ScalarField":
        return cls(mask.grid, k * mask.values.astype(float))


# --------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class ForcingSpec:
    """Body force. ``analytic-vortex`` is the divergence-free field with
    stream function ``magnitude * sin(m pi x / lx) sin(n pi y / ly)``."""

    kind: str = "zero"
    magnitude: float = 0.0
    direction: tuple[float, float] = (1.0, 0.0)
    wavenumbers: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind not in ("zero", "constant-vector", "analytic-vortex"):
            raise ValueError(f"unknown forcing kind {self.kind!r}")
        if not math.isfinite(self.magnitude):
            raise ValueError("forcing magnitude must be finite")

    def packed(self, grid: Grid) -> np.ndarray:
        ops = build_operators(grid)
        if self.kind == "zero" or self.magnitude == 0.0:
            return np.zeros(ops.n)
        if self.kind == "constant-vector":
            gx = np.full((grid.nx + 1, grid.ny), self.magnitude * self.direction[0])
            gy = np.full((grid.nx, grid.ny + 1), self.magnitude * self.direction[1])
            return ops.pack(gx, gy)
        m, n = self.wavenumbers
        a, b = m * np.pi / grid.lx, n * np.pi / grid.ly
        X, Y = grid.xface_coords()
        gx = self.magnitude * b * np.sin(a * X) * np.cos(b * Y)
        X, Y = grid.yface_coords()
        gy = -self.magnitude * a * np.cos(a * X) * np.sin(b * Y)
        return ops.pack(gx, gy)


@dataclass(frozen=True)
class BoundarySpec:
    """No-slip walls, optionally with one wall sliding tangentially (the lid).

    The lid speed ramps smoothly from zero, ``phi_max * (1 - cos(pi t / t_ramp)) / 2``
    for ``t < t_ramp``, so the wall data vanish at t = 0 and the normal flux
    through every wall is identically zero.
    """

    kind: str = "no-slip"
    lid_side: str = "top"
    lid_speed: float = 1.0
    t_ramp: float = 0.2

    def __post_init__(self):
        if self.kind not in ("no-slip", "lid"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.lid_side not in ("top", "bottom", "left", "right"):
            raise ValueError(f"unknown lid side {self.lid_side!r}")
        if self.t_ramp < 0:
            raise ValueError("t_ramp must be non-negative")

    def speed(self, t: float) -> float:
        if self.kind != "lid":
            return 0.0
        if self.t_ramp > 0 and t < self.t_ramp:
            return self.lid_speed * 0.5 * (1.0 - math.cos(math.pi * max(t, 0.0) / self.t_ramp))
        return self.lid_speed

    def wall_speeds(self, t: float) -> dict:
        s = self.speed(t)
        return {self.lid_side: s} if s != 0.0 else {}

    def max_speed(self) -> float:
        return abs(self.lid_speed) if self.kind == "lid" else 0.0

    def mirrored(self) -> "BoundarySpec":
        """Reflection about the vertical midline."""
        side = {"left": "right", "right": "left"}.get(self.lid_side, self.lid_side)
        speed = -self.lid_speed if self.lid_side in ("top", "bottom") else self.lid_speed
        return replace(self, lid_side=side, lid_speed=speed)


@dataclass(frozen=True)
class SolverConfig:
    nu: float = 0.01
    k_penalty: float = 1e6
    T: float = 2.0
    dt: float | None = None
    cfl_safety: float = 0.5
    poisson_method: str = "dct"
    poisson_tol: float = 1e-10
    poisson_max_iter: int = 5000
    div_tol: float = 1e-8

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.k_penalty >= 0:
            raise ValueError("k_penalty must be non-negative")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.poisson_method not in ("dct", "cg"):
            raise ValueError("poisson_method must be 'dct' or 'cg'")
        if not (self.poisson_tol > 0 and self.div_tol > 0):
            raise ValueError("tolerances must be positive")


def cfl_dt(v: StaggeredVelocity, cfg: SolverConfig, speed: float | None = None) -> float:
    """Largest stable explicit step times ``cfg.cfl_safety``.

    Minimum of the advective limit ``1 / max(|ux|/dx + |uy|/dy)`` (taken per
    component) and the diffusive limit ``1 / (2 nu (1/dx^2 + 1/dy^2))``.
    ``speed`` overrides the velocity maximum read from ``v``.
    """
    g = v.grid
    diff = 1.0 / (2.0 * cfg.nu * (1.0 / g.dx**2 + 1.0 / g.dy**2))
    if speed is None:
        rate = max(np.abs(v.ux).max() / g.dx, np.abs(v.uy).max() / g.dy)
    else:
        rate = abs(speed) / min(g.dx, g.dy)
    adv = math.inf if rate == 0 else 1.0 / rate
    return cfg.cfl_safety * min(adv, diff)


def time_grid(grid: Grid, cfg: SolverConfig, forcing: ForcingSpec, bc: BoundarySpec) -> np.ndarray:
    """Uniform times 0 = t_0 < ... < t_N = T shared by every run on this setup.

    Without an explicit ``cfg.dt`` the step comes from :func:`cfl_dt` with
    the velocity scale taken from the wall speed and the impulse of the
    forcing, rounded down so that N dt = T exactly.
    """
    if cfg.dt is not None:
        dt = cfg.dt
    else:
        g_max = float(np.abs(forcing.packed(grid)).max()) if forcing.kind != "zero" else 0.0
        speed = max(bc.max_speed(), g_max * cfg.T, 1e-12)
        dt = cfl_dt(StaggeredVelocity.zeros(grid), cfg, speed=speed)
    nsteps = max(1, int(math.ceil(cfg.T / dt - 1e-9)))
    return np.linspace(0.0, cfg.T, nsteps + 1)


# --------------------------------------------------------------------------
# Poisson / projection


def cg_solve(ops: MacOperators, rhs: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned CG on ``-Div Grad p = -rhs`` (SPD on zero-mean fields)."""
    A = (-(ops.Div @ ops.Grad)).tocsr()
    b = -rhs.ravel()
    b = b - b.mean()
    dinv = 1.0 / A.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0
    z = dinv * r
    z -= z.mean()
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x - x.mean(), it
        z = dinv * r
        z -= z.mean()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise PoissonNotConverged(f"CG did not reach {tol:g} in {max_iter} iterations")


@dataclass
class PoissonResult:
    field: "ScalarField"
    mean_removed: float
    warning: bool
    iterations: int
    residual: float


def poisson_solve(rhs: ScalarField, cfg: SolverConfig) -> PoissonResult:
    """Solve ``-Lap p = rhs`` with homogeneous Neumann walls, zero-mean ``p``.

    A non-zero mean of ``rhs`` violates solvability; it is subtracted and
    the ``warning`` flag set.
    """
    ops = build_operators(rhs.grid)
    r = rhs.values.astype(float)
    mean = float(r.mean())
    scale = float(np.abs(r).max()) if r.size else 0.0
    warn = scale > 0 and abs(mean) > 1e-12 * scale
    if warn:
        warnings.warn(f"Poisson right-hand side has mean {mean:.3g}; removed", RuntimeWarning, stacklevel=2)
    r = r - mean
    iters = 0
    if cfg.poisson_method == "dct":
        p = -ops.solve_neumann(r)
    else:
        p, iters = cg_solve(ops, -r, cfg.poisson_tol, cfg.poisson_max_iter)
        p = p.reshape(rhs.grid.shape)
    p = p - p.mean()
    res = r.ravel() + ops.Div @ (ops.Grad @ p.ravel())
    rnorm = float(np.linalg.norm(res))
    bnorm = float(np.linalg.norm(r))
    if bnorm > 0 and rnorm > cfg.poisson_tol * bnorm:
        raise PoissonNotConverged(f"Poisson residual {rnorm / bnorm:.3g} above tolerance {cfg.poisson_tol:g}")
    return PoissonResult(ScalarField(rhs.grid, p), mean, warn, iters, rnorm / bnorm if bnorm else 0.0)


def project(ops: MacOperators, u: np.ndarray, cfg: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return the divergence-free part of ``u`` and the potential removed."""
    d = ops.Div @ u
    d -= d.mean()
    if cfg.poisson_method == "dct":
        phi = ops.solve_neumann(d).ravel()
    else:
        phi, _ = cg_solve(ops, d, cfg.poisson_tol, cfg.poisson_max_iter)
    return u - ops.Grad @ phi, phi


def divergence(v: StaggeredVelocity) -> ScalarField:
    g = v.grid
    d = (v.ux[1:] - v.ux[:-1]) / g.dx + (v.uy[:, 1:] - v.uy[:, :-1]) / g.dy
    return ScalarField(g, d)


def kinetic_energy(v: StaggeredVelocity) -> float:
    cx, cy = v.centers()
    return 0.5 * float((cx**2 + cy**2).sum()) * v.grid.cell_volume


# --------------------------------------------------------------------------
# time stepping


class Stepper:
    """Precomputed operators for repeated steps on one setup."""

    def __init__(self, grid: Grid, kappa: ScalarField | None, forcing: ForcingSpec, bc: BoundarySpec, cfg: SolverConfig):
        self.grid = grid
        self.ops = build_operators(grid)
        self.cfg = cfg
        self.bc = bc
        self.g = forcing.packed(grid)
        kv = np.zeros(grid.shape) if kappa is None else kappa.values
        if kappa is not None and kappa.grid != grid:
            raise ValueError("kappa lives on a different grid")
        if np.any(kv < 0) or not np.all(np.isfinite(kv)):
            raise ValueError("kappa must be finite and non-negative")
        self.kappa_face = self.ops.Kf @ kv.ravel()
        self._walls: tuple[float, tuple] | None = None

    def wall(self, t: float):
        if self._walls is None or self._walls[0] != t:
            self._walls = (t, wall_terms(self.ops, self.bc.wall_speeds(t)))
        return self._walls[1]

    def predict(self, u: np.ndarray, t: float, dt: float) -> np.ndarray:
        """Explicit advection/diffusion/forcing update (before drag and projection)."""
        gx, gy, gl = self.wall(t)
        rhs = -advection(self.ops, u, gx, gy) + self.cfg.nu * (self.ops.Lap @ u + gl) + self.g
        return u + dt * rhs

    def penalize(self, ustar: np.ndarray, dt: float) -> np.ndarray:
        return ustar / (1.0 + dt * self.kappa_face)

    def step(self, u: np.ndarray, t: float, dt: float, index: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (u_next, pressure, u_star)."""
        g = self.grid
        rate = max(
            np.abs(u[: self.ops.nux]).max(initial=0.0) / g.dx,
            np.abs(u[self.ops.nux :]).max(initial=0.0) / g.dy,
            self.bc.speed(t) / min(g.dx, g.dy),
        )
        if rate * dt > 1.0:
            raise CFLViolation(f"Courant number {rate * dt:.3g} exceeds 1", index)
        ustar = self.predict(u, t, dt)
        unew, phi = project(self.ops, self.penalize(ustar, dt), self.cfg)
        if not np.all(np.isfinite(unew)):
            raise BlowUp("non-finite velocity", index)
        div = np.abs(self.ops.Div @ unew).max(initial=0.0)
        if div > self.cfg.div_tol:
            raise SolverError(f"divergence {div:.3g} above div_tol {self.cfg.div_tol:g}", index)
        return unew, phi / dt, ustar


def step_forward(
    state: StaggeredVelocity,
    kappa: ScalarField,
    forcing: ForcingSpec,
    bc: BoundarySpec,
    t: float,
    dt: float,
    cfg: SolverConfig,
) -> tuple[StaggeredVelocity, ScalarField]:
    stepper = Stepper(state.grid, kappa, forcing, bc, cfg)
    u, p, _ = stepper.step(state.packed(), t, dt)
    return StaggeredVelocity.from_packed(state.grid, u), ScalarField(state.grid, p.reshape(state.grid.shape))


@dataclass(eq=False)
class Trajectory:
    """Velocity snapshots on a shared uniform time grid.

    ``data`` holds packed velocities, one row per time, in full mode. In
    window mode ``samples[w]`` holds cell-centered velocities of shape
    ``(ntimes, ncells_w, 2)`` and ``data`` is None. ``stars`` (optional)
    keeps the pre-projection predictor of every step.
    """

    grid: Grid
    times: np.ndarray
    data: np.ndarray | None = None
    samples: list | None = None
    windows: list | None = None
    stars: np.ndarray | None = None
    energy: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing with at least two entries")
        self.times = t

    @property
    def nsteps(self) -> int:
        return len(self.times) - 1

    @property
    def full(self) -> bool:
        return self.data is not None

    def snapshot(self, n: int) -> StaggeredVelocity:
        return StaggeredVelocity.from_packed(self.grid, self.data[n])

    def __len__(self):
        return len(self.times)


def sample_windows(ops: MacOperators, u: np.ndarray, windows: Sequence[MaskField]) -> list[np.ndarray]:
    cx = ops.Cx @ u
    cy = ops.Cy @ u
    out = []
    for w in windows:
        idx = np.flatnonzero(w.values.ravel())
        out.append(np.stack([cx[idx], cy[idx]], axis=-1))
    return out


def solve_forward(
    cfg: SolverConfig,
    kappa: ScalarField,
    forcing: ForcingSpec,
    bc: BoundarySpec,
    record="full",
    times: np.ndarray | None = None,
    keep_stars: bool = False,
) -> Trajectory:
    """Run from u(., 0) = 0 to T.

    ``record`` is ``"full"`` or a list of window masks; in the latter case
    only cell-centered samples inside the windows are kept.
    """
    grid = kappa.grid
    if times is None:
        times = time_grid(grid, cfg, forcing, bc)
    stepper = Stepper(grid, kappa, forcing, bc, cfg)
    ops = stepper.ops
    nt = len(times)
    full = isinstance(record, str)
    if full and record != "full":
        raise ValueError(f"unknown record mode {record!r}")
    u = np.zeros(ops.n)
    data = np.empty((nt, ops.n)) if full else None
    stars = np.empty((nt - 1, ops.n)) if keep_stars else None
    windows = None if full else list(record)
    samples = None if full else [np.empty((nt, w.count, 2)) for w in windows]
    energy = np.empty(nt)

    def store(n, u):
        if full:
            data[n] = u
        else:
            for buf, s in zip(samples, sample_windows(ops, u, windows)):
                buf[n] = s
        cx = ops.Cx @ u
        cy = ops.Cy @ u
        energy[n] = 0.5 * float(cx @ cx + cy @ cy) * grid.cell_volume

    store(0, u)
    for n in range(nt - 1):
        dt = times[n + 1] - times[n]
        u, _, ustar = stepper.step(u, times[n], dt, index=n)
        if keep_stars:
            stars[n] = ustar
        store(n + 1, u)
    log.debug("forward run: %d steps, final energy %.4g", nt - 1, energy[-1])
    return Trajectory(grid, np.asarray(times), data=data, samples=samples, windows=windows, stars=stars, energy=energy)


def gradient_norm_linf_l2(traj: Trajectory) -> float:
    """max_t ||grad u(t)||_{L2}, logged as a proxy for the small-data assumption."""
    return max(math.sqrt(gradient_sq(traj.grid, u)) for u in traj.data)


def gradient_sq(grid: Grid, u: np.ndarray) -> float:
    """``||grad u||_{L2}^2`` from one-sided face differences (interior pairs only)."""
    ux, uy = build_operators(grid).unpack(u)
    s = (np.diff(ux, axis=0) ** 2).sum() / grid.dx**2 + (np.diff(uy, axis=1) ** 2).sum() / grid.dy**2
    s += (np.diff(ux, axis=1) ** 2).sum() / grid.dy**2 + (np.diff(uy, axis=0) ** 2).sum() / grid.dx**2
    return float(s * grid.cell_volume)


def trajectory_norm_in_mask(traj: Trajectory, mask: MaskField) -> float:
    """Space-time L2 norm of the cell-centered velocity restricted to ``mask``
    (trapezoidal rule in time)."""
    ops = build_operators(traj.grid)
    idx = np.flatnonzero(mask.values.ravel())
    w = trapezoid_weights(traj.times)
    Cx = ops.Cx[idx]
    Cy = ops.Cy[idx]
    cx = Cx @ traj.data.T
    cy = Cy @ traj.data.T
    per_t = (cx**2 + cy**2).sum(axis=0) * traj.grid.cell_volume
    return math.sqrt(float(w @ per_t))


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    dt = np.diff(times)
    w = np.zeros(len(times))
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w
