"""Sparse stencils on the MAC grid.

Velocities are packed into one vector holding the interior x-faces
(i = 1..nx-1, all j) followed by the interior y-faces (all i, j = 1..ny-1).
Wall-normal faces are identically zero and never stored. Wall-tangential
values enter through ghost reflections ``u_ghost = 2*phi - u_inside``,
which split every stencil into a homogeneous sparse matrix plus an affine
vector proportional to the wall speed.

All faces carry the same control volume dx*dy, so the plain Euclidean
inner product on packed vectors is the discrete L2 product up to a constant.
That is what makes transposes below adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy import fft

from .grid import Grid

SIDES = ("top", "bottom", "left", "right")


class _Builder:
    def __init__(self, nrows: int, ncols: int):
        self.shape = (nrows, ncols)
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows).ravel()
        cols = np.asarray(cols).ravel()
        vals = np.broadcast_to(np.asarray(vals, dtype=float), rows.shape).ravel()
        keep = (rows >= 0) & (cols >= 0)
        self.rows.append(rows[keep])
        self.cols.append(cols[keep])
        self.vals.append(vals[keep])

    def tocsr(self) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix(self.shape)
        m = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=self.shape,
        )
        return m.tocsr()


@dataclass(frozen=True, eq=False)
class MacOperators:
    grid: Grid
    nux: int
    nuy: int
    ix: np.ndarray  # (nx+1, ny) packed index of x-faces, -1 on walls
    iy: np.ndarray  # (nx, ny+1) packed index of y-faces, -1 on walls
    Dx: sp.csr_matrix  # central d/dx of each component at its own faces
    Dy: sp.csr_matrix
    DxT: sp.csr_matrix
    DyT: sp.csr_matrix
    Qx: sp.csr_matrix  # x-velocity interpolated to every face
    Qy: sp.csr_matrix
    QxT: sp.csr_matrix
    QyT: sp.csr_matrix
    Lap: sp.csr_matrix  # 5-point vector Laplacian, homogeneous Dirichlet
    Div: sp.csr_matrix  # faces -> cells
    Grad: sp.csr_matrix  # cells -> faces, equals -Div.T
    Cx: sp.csr_matrix  # x-faces -> cell centers (arithmetic mean)
    Cy: sp.csr_matrix
    CxT: sp.csr_matrix
    CyT: sp.csr_matrix
    Kf: sp.csr_matrix  # cell penalty -> face penalty (mean of adjacent cells)
    wall: dict  # per side: affine unit vectors for Dx/Dy/Lap ghost terms
    laplacian_eigs: np.ndarray  # eigenvalues of Div @ Grad in the DCT-II basis

    @property
    def n(self) -> int:
        return self.nux + self.nuy

    def pack(self, ux: np.ndarray, uy: np.ndarray) -> np.ndarray:
        return np.concatenate([ux[1:-1, :].ravel(), uy[:, 1:-1].ravel()])

    def unpack(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = self.grid
        ux = np.zeros((g.nx + 1, g.ny))
        uy = np.zeros((g.nx, g.ny + 1))
        ux[1:-1, :] = u[: self.nux].reshape(g.nx - 1, g.ny)
        uy[:, 1:-1] = u[self.nux :].reshape(g.nx, g.ny - 1)
        return ux, uy

    def centers(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centered components as (nx, ny) arrays."""
        g = self.grid
        return (self.Cx @ u).reshape(g.nx, g.ny), (self.Cy @ u).reshape(g.nx, g.ny)

    def divergence(self, u: np.ndarray) -> np.ndarray:
        return (self.Div @ u).reshape(self.grid.shape)

    def solve_neumann(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``Div Grad p = rhs`` (rhs with zero mean) with zero-mean p.

        Exact inverse of the discrete Neumann Laplacian through DCT-II.
        """
        r = fft.dctn(rhs.reshape(self.grid.shape), type=2, norm="ortho")
        with np.errstate(divide="ignore", invalid="ignore"):
            r = r / self.laplacian_eigs
        r[0, 0] = 0.0
        return fft.idctn(r, type=2, norm="ortho")


@lru_cache(maxsize=8)
def build_operators(grid: Grid) -> MacOperators:
    nx, ny, dx, dy = grid.nx, grid.ny, grid.dx, grid.dy
    nux = (nx - 1) * ny
    nuy = nx * (ny - 1)
    n = nux + nuy
    ncell = nx * ny

    ix = -np.ones((nx + 1, ny), dtype=np.int64)
    ix[1:-1, :] = np.arange(nux).reshape(nx - 1, ny)
    iy = -np.ones((nx, ny + 1), dtype=np.int64)
    iy[:, 1:-1] = nux + np.arange(nuy).reshape(nx, ny - 1)
    ic = np.arange(ncell).reshape(nx, ny)

    # index arrays of interior faces
    IXi, IXj = np.meshgrid(np.arange(1, nx), np.arange(ny), indexing="ij")
    IYi, IYj = np.meshgrid(np.arange(nx), np.arange(1, ny), indexing="ij")
    rx = ix[IXi, IXj]
    ry = iy[IYi, IYj]

    def ux_at(i, j):
        """Packed index of x-face (i, j); -1 where it is a wall or outside."""
        i = np.asarray(i)
        j = np.asarray(j)
        ok = (i >= 0) & (i <= nx) & (j >= 0) & (j < ny)
        out = -np.ones(np.broadcast(i, j).shape, dtype=np.int64)
        out[ok] = ix[np.broadcast_to(i, out.shape)[ok], np.broadcast_to(j, out.shape)[ok]]
        return out

    def uy_at(i, j):
        i = np.asarray(i)
        j = np.asarray(j)
        ok = (i >= 0) & (i < nx) & (j >= 0) & (j <= ny)
        out = -np.ones(np.broadcast(i, j).shape, dtype=np.int64)
        out[ok] = iy[np.broadcast_to(i, out.shape)[ok], np.broadcast_to(j, out.shape)[ok]]
        return out

    # tangential ghost reflection: neighbor outside the wall maps to -self
    wall = {s: {"dx": np.zeros(n), "dy": np.zeros(n), "lap": np.zeros(n)} for s in SIDES}

    # --- central first derivatives -----------------------------------
    bx = _Builder(n, n)
    by = _Builder(n, n)
    # ux along x: normal direction, wall faces are zero
    bx.add(rx, ux_at(IXi + 1, IXj), 0.5 / dx)
    bx.add(rx, ux_at(IXi - 1, IXj), -0.5 / dx)
    # ux along y: tangential direction, ghosts at bottom/top
    by.add(rx, ux_at(IXi, IXj + 1), 0.5 / dy)
    by.add(rx, ux_at(IXi, IXj - 1), -0.5 / dy)
    bot = IXj == 0
    top = IXj == ny - 1
    by.add(rx[bot], rx[bot], 0.5 / dy)  # -(-u)/(2dy)
    by.add(rx[top], rx[top], -0.5 / dy)
    wall["bottom"]["dy"][rx[bot]] = -1.0 / dy  # -(2 phi)/(2 dy)
    wall["top"]["dy"][rx[top]] = 1.0 / dy
    # uy along y: normal
    by.add(ry, uy_at(IYi, IYj + 1), 0.5 / dy)
    by.add(ry, uy_at(IYi, IYj - 1), -0.5 / dy)
    # uy along x: tangential, ghosts at left/right
    bx.add(ry, uy_at(IYi + 1, IYj), 0.5 / dx)
    bx.add(ry, uy_at(IYi - 1, IYj), -0.5 / dx)
    lft = IYi == 0
    rgt = IYi == nx - 1
    bx.add(ry[lft], ry[lft], 0.5 / dx)
    bx.add(ry[rgt], ry[rgt], -0.5 / dx)
    wall["left"]["dx"][ry[lft]] = -1.0 / dx
    wall["right"]["dx"][ry[rgt]] = 1.0 / dx
    Dx = bx.tocsr()
    Dy = by.tocsr()

    # --- Laplacian ------------------------------------------------------
    bl = _Builder(n, n)
    for rows, nbr_x, nbr_y, tang_lo, tang_hi, axis in (
        (rx, (ux_at(IXi - 1, IXj), ux_at(IXi + 1, IXj)), (ux_at(IXi, IXj - 1), ux_at(IXi, IXj + 1)), bot, top, "y"),
        (ry, (uy_at(IYi - 1, IYj), uy_at(IYi + 1, IYj)), (uy_at(IYi, IYj - 1), uy_at(IYi, IYj + 1)), lft, rgt, "x"),
    ):
        bl.add(rows, rows, -2.0 / dx**2 - 2.0 / dy**2)
        for nb in nbr_x:
            bl.add(rows, nb, 1.0 / dx**2)
        for nb in nbr_y:
            bl.add(rows, nb, 1.0 / dy**2)
        hh = dy**2 if axis == "y" else dx**2
        bl.add(rows[tang_lo], rows[tang_lo], -1.0 / hh)
        bl.add(rows[tang_hi], rows[tang_hi], -1.0 / hh)
        lo_side, hi_side = ("bottom", "top") if axis == "y" else ("left", "right")
        wall[lo_side]["lap"][rows[tang_lo]] = 2.0 / hh
        wall[hi_side]["lap"][rows[tang_hi]] = 2.0 / hh
    Lap = bl.tocsr()

    # --- interpolation of advecting velocities --------------------------
    bqx = _Builder(n, n)
    bqy = _Builder(n, n)
    bqx.add(rx, rx, 1.0)
    for di in (0, 1):
        for dj in (-1, 0):
            bqx.add(ry, ux_at(IYi + di, IYj + dj), 0.25)
    bqy.add(ry, ry, 1.0)
    for di in (-1, 0):
        for dj in (0, 1):
            bqy.add(rx, uy_at(IXi + di, IXj + dj), 0.25)
    Qx = bqx.tocsr()
    Qy = bqy.tocsr()

    # --- divergence / gradient -----------------------------------------
    CI, CJ = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    rc = ic[CI, CJ]
    bd = _Builder(ncell, n)
    bd.add(rc, ux_at(CI + 1, CJ), 1.0 / dx)
    bd.add(rc, ux_at(CI, CJ), -1.0 / dx)
    bd.add(rc, uy_at(CI, CJ + 1), 1.0 / dy)
    bd.add(rc, uy_at(CI, CJ), -1.0 / dy)
    Div = bd.tocsr()
    Grad = (-Div.T).tocsr()

    # --- centers and face penalty --------------------------------------
    bcx = _Builder(ncell, n)
    bcx.add(rc, ux_at(CI, CJ), 0.5)
    bcx.add(rc, ux_at(CI + 1, CJ), 0.5)
    bcy = _Builder(ncell, n)
    bcy.add(rc, uy_at(CI, CJ), 0.5)
    bcy.add(rc, uy_at(CI, CJ + 1), 0.5)
    Cx = bcx.tocsr()
    Cy = bcy.tocsr()
    bk = _Builder(n, ncell)
    bk.add(rx, ic[IXi - 1, IXj], 0.5)
    bk.add(rx, ic[IXi, IXj], 0.5)
    bk.add(ry, ic[IYi, IYj - 1], 0.5)
    bk.add(ry, ic[IYi, IYj], 0.5)
    Kf = bk.tocsr()

    kx = np.arange(nx)
    ky = np.arange(ny)
    lam_x = -(2.0 - 2.0 * np.cos(np.pi * kx / nx)) / dx**2
    lam_y = -(2.0 - 2.0 * np.cos(np.pi * ky / ny)) / dy**2
    eigs = lam_x[:, None] + lam_y[None, :]

    return MacOperators(
        grid=grid,
        nux=nux,
        nuy=nuy,
        ix=ix,
        iy=iy,
        Dx=Dx,
        Dy=Dy,
        DxT=Dx.T.tocsr(),
        DyT=Dy.T.tocsr(),
        Qx=Qx,
        Qy=Qy,
        QxT=Qx.T.tocsr(),
        QyT=Qy.T.tocsr(),
        Lap=Lap,
        Div=Div,
        Grad=Grad,
        Cx=Cx,
        Cy=Cy,
        CxT=Cx.T.tocsr(),
        CyT=Cy.T.tocsr(),
        Kf=Kf,
        wall=wall,
        laplacian_eigs=eigs,
    )


def wall_terms(ops: MacOperators, speeds: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Affine ghost contributions (dx, dy, lap) for given tangential wall speeds."""
    gx = np.zeros(ops.n)
    gy = np.zeros(ops.n)
    gl = np.zeros(ops.n)
    for side, speed in speeds.items():
        if speed == 0.0:
            continue
        w = ops.wall[side]
        gx += speed * w["dx"]
        gy += speed * w["dy"]
        gl += speed * w["lap"]
    return gx, gy, gl


def advection(ops: MacOperators, u: np.ndarray, gx=None, gy=None) -> np.ndarray:
    """Skew-symmetric convection ``A(u) u``.

    ``A(a) = (N(a) - N(a)^T) / 2`` with ``N(a) = diag(Qx a) Dx + diag(Qy a) Dy``,
    the mean of the advective and conservative forms. ``A(a)`` is skew for
    every ``a``, so ``<A(a) w, w> = 0`` holds exactly. ``gx``/``gy`` carry
    moving-wall ghost values of the advective half.
    """
    qx = ops.Qx @ u
    qy = ops.Qy @ u
    dxu = ops.Dx @ u
    dyu = ops.Dy @ u
    if gx is not None:
        dxu = dxu + gx
    if gy is not None:
        dyu = dyu + gy
    return 0.5 * (qx * dxu + qy * dyu - ops.DxT @ (qx * u) - ops.DyT @ (qy * u))


def skew_operator(ops: MacOperators, a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``A(a) w`` for an arbitrary advecting field ``a`` (homogeneous walls)."""
    qx = ops.Qx @ a
    qy = ops.Qy @ a
    return 0.5 * (qx * (ops.Dx @ w) + qy * (ops.Dy @ w) - ops.DxT @ (qx * w) - ops.DyT @ (qy * w))


def advection_jvp(ops: MacOperators, u: np.ndarray, w: np.ndarray, gx=None, gy=None) -> np.ndarray:
    """Derivative of :func:`advection` at ``u`` in direction ``w``."""
    qx, qy = ops.Qx @ u, ops.Qy @ u
    wx, wy = ops.Qx @ w, ops.Qy @ w
    dxu = ops.Dx @ u if gx is None else ops.Dx @ u + gx
    dyu = ops.Dy @ u if gy is None else ops.Dy @ u + gy
    return 0.5 * (
        wx * dxu
        + qx * (ops.Dx @ w)
        + wy * dyu
        + qy * (ops.Dy @ w)
        - ops.DxT @ (wx * u + qx * w)
        - ops.DyT @ (wy * u + qy * w)
    )


def advection_vjp(ops: MacOperators, u: np.ndarray, v: np.ndarray, gx=None, gy=None) -> np.ndarray:
    """Transpose of :func:`advection_jvp` applied to ``v``.

    Splits into ``-A(u) v`` (the transport ``-(u.grad) v``) and the
    transposed velocity-gradient product ``(grad u)^T v``.
    """
    return transposed_gradient_product(ops, u, v, gx, gy) - skew_operator(ops, u, v)


def transposed_gradient_product(ops: MacOperators, u: np.ndarray, v: np.ndarray, gx=None, gy=None) -> np.ndarray:
    """Adjoint of ``w -> A(w) u``; consistent with ``(grad u)^T v``."""
    dxu = ops.Dx @ u if gx is None else ops.Dx @ u + gx
    dyu = ops.Dy @ u if gy is None else ops.Dy @ u + gy
    return 0.5 * (
        ops.QxT @ (dxu * v - u * (ops.Dx @ v))
        + ops.QyT @ (dyu * v - u * (ops.Dy @ v))
    )
