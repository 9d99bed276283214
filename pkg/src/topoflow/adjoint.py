"""Backward-in-time adjoint of the obstacle-free flow.

Continuous problem, for (v, p) on (0, T):

    -dv/dt - nu Lap v + (grad u0)^T v - (u0 . grad) v + grad p = -2 (u0 - u_meas) chi_W
    div v = 0,  v = 0 on the walls,  v(., T) = 0

With tau = T - t this is a forward parabolic problem. Each backward step
treats transport, diffusion and the misfit source explicitly and projects
onto divergence-free fields. The transport pair is the exact transpose of
the linearized skew-symmetric convection used by the forward stepper, so
the discrete gradient identity holds to round-off at the level of packed
face vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import MaskField
from .mac import build_operators, skew_operator, transposed_gradient_product, wall_terms
from .ns_solver import (
    BlowUp,
    BoundarySpec,
    CFLViolation,
    SolverConfig,
    StaggeredVelocity,
    Trajectory,
    project,
    trapezoid_weights,
)


@dataclass(eq=False)
class MeasurementSet:
    """Cell-centered velocity samples inside the observation windows.

    ``samples[w]`` has shape ``(len(times), windows[w].count, 2)``; cells are
    ordered as in ``np.flatnonzero(mask.values.ravel())``.
    """

    windows: list
    times: np.ndarray
    samples: list = field(repr=False)
    sigma: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.windows) != len(self.samples):
            raise ValueError("one sample array per window expected")
        for w, s in zip(self.windows, self.samples):
            if s.shape != (len(self.times), w.count, 2):
                raise ValueError(f"sample block {s.shape} does not match window with {w.count} cells")

    @property
    def sample_count(self) -> int:
        return sum(w.count for w in self.windows) * len(self.times)

    def at(self, n: int) -> list[np.ndarray]:
        return [s[n] for s in self.samples]

    def max_abs(self) -> float:
        return max((float(np.abs(s).max()) for s in self.samples if s.size), default=0.0)


@dataclass(eq=False)
class AdjointTrajectory:
    """Adjoint snapshots ``data[n] = v0(t_n)``, packed like :class:`Trajectory`."""

    grid: object
    times: np.ndarray
    data: np.ndarray = field(repr=False)

    def snapshot(self, n: int) -> StaggeredVelocity:
        return StaggeredVelocity.from_packed(self.grid, self.data[n])

    @property
    def nsteps(self) -> int:
        return len(self.times) - 1


def check_time_grids(a: np.ndarray, b: np.ndarray) -> None:
    if len(a) != len(b) or not np.allclose(a, b, rtol=0, atol=1e-12 * max(1.0, float(np.max(np.abs(a))))):
        raise ValueError("time grids do not match")


def misfit_source(u0, meas_snapshot, windows) -> np.ndarray:
    """``-2 (u0 - u_meas) chi_W`` built on cells and averaged to faces.

    ``u0`` is a packed vector or a :class:`StaggeredVelocity`. Returns a
    packed face vector.
    """
    if isinstance(u0, StaggeredVelocity):
        grid = u0.grid
        u = u0.packed()
    else:
        grid = windows[0].grid if windows else None
        u = np.asarray(u0)
    if not windows:
        return np.zeros_like(u)
    ops = build_operators(grid)
    if len(meas_snapshot) != len(windows):
        raise ValueError("one measurement block per window expected")
    cx = ops.Cx @ u
    cy = ops.Cy @ u
    rx = np.zeros(ops.grid.nx * ops.grid.ny)
    ry = np.zeros_like(rx)
    for w, m in zip(windows, meas_snapshot):
        idx = np.flatnonzero(w.values.ravel())
        m = np.asarray(m)
        if m.shape != (len(idx), 2):
            raise ValueError(f"measurement block {m.shape} does not match window with {len(idx)} cells")
        np.add.at(rx, idx, cx[idx] - m[:, 0])
        np.add.at(ry, idx, cy[idx] - m[:, 1])
    return -2.0 * (ops.CxT @ rx + ops.CyT @ ry)


def solve_adjoint(u0: Trajectory, meas: MeasurementSet, cfg: SolverConfig, bc: BoundarySpec | None = None) -> AdjointTrajectory:
    """March the adjoint from v(T) = 0 back to t = 0.

    ``bc`` must be the wall data of the forward run that produced ``u0``;
    it enters through the linearized convection near a moving lid.
    """
    if not u0.full:
        raise ValueError("the adjoint needs a full-mode forward trajectory")
    check_time_grids(u0.times, meas.times)
    for w in meas.windows:
        if w.grid != u0.grid:
            raise ValueError("measurement windows live on a different grid")
    bc = bc or BoundarySpec()
    grid = u0.grid
    ops = build_operators(grid)
    times = u0.times
    weights = trapezoid_weights(times)
    N = len(times) - 1
    data = np.zeros((N + 1, ops.n))
    v = np.zeros(ops.n)
    for n in range(N - 1, -1, -1):
        m = n + 1
        u = u0.data[m]
        src = weights[m] * misfit_source(u, meas.at(m), meas.windows)
        if m < N:
            dt = times[m + 1] - times[m]
            rate = max(np.abs(u[: ops.nux]).max(initial=0.0) / grid.dx, np.abs(u[ops.nux :]).max(initial=0.0) / grid.dy)
            if rate * dt > 1.0:
                raise CFLViolation(f"Courant number {rate * dt:.3g} of the background flow exceeds 1", n)
            gx, gy, _ = wall_terms(ops, bc.wall_speeds(times[m]))
            transport = skew_operator(ops, u, v) - transposed_gradient_product(ops, u, v, gx, gy)
            rhs = v + dt * (cfg.nu * (ops.Lap @ v) + transport) + src
        else:
            rhs = src
        v, _ = project(ops, rhs, cfg)
        if not np.all(np.isfinite(v)):
            raise BlowUp("non-finite adjoint velocity", n)
        data[n] = v
    return AdjointTrajectory(grid, times.copy(), data)
