"""Misfit functional and topological gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointTrajectory, MeasurementSet, check_time_grids
from .grid import ShapeSpec, perimeter
from .mac import build_operators
from .ns_solver import ScalarField, Trajectory, sample_windows, trapezoid_weights


@dataclass(eq=False)
class SensitivityField:
    field: ScalarField
    quadrature: str = "trapezoid"
    gamma: float = 0.0
    includes_perimeter: bool = False

    @property
    def grid(self):
        return self.field.grid

    @property
    def values(self) -> np.ndarray:
        return self.field.values


def _window_samples(u, meas: MeasurementSet) -> list[np.ndarray]:
    """Samples of ``u`` (trajectory or ready-made sample list) in meas' windows."""
    if isinstance(u, Trajectory):
        check_time_grids(u.times, meas.times)
        if u.full:
            ops = build_operators(u.grid)
            blocks = [np.empty_like(s) for s in meas.samples]
            for n, snap in enumerate(u.data):
                for b, s in zip(blocks, sample_windows(ops, snap, meas.windows)):
                    b[n] = s
            return blocks
        if len(u.windows) != len(meas.windows) or any(a != b for a, b in zip(u.windows, meas.windows)):
            raise ValueError("trajectory was recorded on different windows")
        return u.samples
    blocks = list(u)
    if len(blocks) != len(meas.samples) or any(a.shape != b.shape for a, b in zip(blocks, meas.samples)):
        raise ValueError("sample blocks do not match the measurement layout")
    return blocks


def cost(u, meas: MeasurementSet) -> float:
    """``K = sum_n w_n sum_{window cells} |u - u_meas|^2 dx dy`` (trapezoid in time)."""
    if not meas.windows:
        return 0.0
    w = trapezoid_weights(meas.times)
    vol = meas.windows[0].grid.cell_volume
    total = 0.0
    for s, m in zip(_window_samples(u, meas), meas.samples):
        per_t = ((s - m) ** 2).sum(axis=(1, 2))
        total += float(w @ per_t)
    return total * vol


def cost_regularized(u, meas: MeasurementSet, gamma: float, shape: ShapeSpec | None) -> float:
    per = 0.0 if shape is None else perimeter(shape)
    return cost(u, meas) + gamma * per


def topological_gradient(
    u0: Trajectory,
    v0: AdjointTrajectory,
    include_perimeter: bool = False,
    inclusion: ShapeSpec | None = None,
) -> SensitivityField:
    """``D_K(x) = int_0^T u0(x, t) . v0(x, t) dt`` at every cell center.

    Face values are averaged to centers before the product; the time
    integral is trapezoidal. With ``include_perimeter`` the constant
    perimeter of ``inclusion`` is added (the empty initial guess makes it 0).
    """
    if not u0.full:
        raise ValueError("topological gradient needs a full-mode forward trajectory")
    if u0.grid != v0.grid:
        raise ValueError("forward and adjoint trajectories live on different grids")
    check_time_grids(u0.times, v0.times)
    ops = build_operators(u0.grid)
    w = trapezoid_weights(u0.times)
    # sum_n w_n (Cx u_n)(Cx v_n) + (Cy u_n)(Cy v_n), batched over time
    acc = np.zeros(ops.grid.nx * ops.grid.ny)
    chunk = 256
    for s in range(0, len(w), chunk):
        U = u0.data[s : s + chunk].T
        V = v0.data[s : s + chunk].T
        ws = w[s : s + chunk]
        acc += ((ops.Cx @ U) * (ops.Cx @ V)) @ ws
        acc += ((ops.Cy @ U) * (ops.Cy @ V)) @ ws
    values = acc.reshape(ops.grid.shape)
    per = 0.0
    if include_perimeter and inclusion is not None:
        per = perimeter(inclusion)
        values = values + per
    return SensitivityField(ScalarField(u0.grid, values), includes_perimeter=include_perimeter)


def discrete_kappa_gradient(u0: Trajectory, v0: AdjointTrajectory) -> ScalarField:
    """Exact derivative of the discrete cost w.r.t. a cell penalty at kappa = 0.

    ``dK/dkappa_c = dx dy sum_n dt_n sum_faces Kf[f, c] u*_n[f] v0_n[f]`` where
    ``u*`` is the pre-projection predictor. Needs ``keep_stars=True`` on the
    forward run. Diagnostic only: the reported sensitivity is
    :func:`topological_gradient`, which differs from this by O(dt + h^2).
    """
    if u0.stars is None:
        raise ValueError("forward run must keep predictor fields (keep_stars=True)")
    ops = build_operators(u0.grid)
    dts = np.diff(u0.times)
    prod = (u0.stars * v0.data[:-1]).T @ dts
    return ScalarField(u0.grid, (ops.Kf.T @ prod).reshape(ops.grid.shape) * ops.grid.cell_volume)
