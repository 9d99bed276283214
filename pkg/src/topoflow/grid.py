"""Uniform staggered (MAC) grid, obstacle/window geometry and rasterization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class LayoutError(ValueError):
    """Geometry violates the obstacle / hold-all / window layout rules.

    ``code`` is one of ``obstacle-outside-holdall``,
    ``window-intersects-holdall`` or ``shape-touches-boundary``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("cell counts must be integers")
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid needs at least 4x4 cells, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0) or not (math.isfinite(self.lx) and math.isfinite(self.ly)):
            raise ValueError("domain extents must be positive and finite")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def h(self) -> float:
        return max(self.dx, self.dy)

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def n_xfaces(self) -> int:
        return (self.nx + 1) * self.ny

    @property
    def n_yfaces(self) -> int:
        return self.nx * (self.ny + 1)

    def xc(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    def yc(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.dy

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center coordinates as two (nx, ny) arrays, index [i, j]."""
        return np.meshgrid(self.xc(), self.yc(), indexing="ij")

    def xface_coords(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(np.arange(self.nx + 1) * self.dx, self.yc(), indexing="ij")

    def yface_coords(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xc(), np.arange(self.ny + 1) * self.dy, indexing="ij")

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        i = min(max(int(math.floor(x / self.dx)), 0), self.nx - 1)
        j = min(max(int(math.floor(y / self.dy)), 0), self.ny - 1)
        return i, j

    def center_of(self, i: int, j: int) -> tuple[float, float]:
        return ((i + 0.5) * self.dx, (j + 0.5) * self.dy)


def build_grid(nx: int, ny: int, lx: float, ly: float) -> Grid:
    return Grid(nx, ny, float(lx), float(ly))


@dataclass(frozen=True)
class ShapeSpec:
    """A disk (``size = (r,)``) or an axis-aligned box (``size = (a, b)`` half-widths)."""

    kind: str
    center: tuple[float, float]
    size: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        size = self.size if isinstance(self.size, (tuple, list)) else (self.size,)
        object.__setattr__(self, "size", tuple(float(s) for s in size))
        if self.kind == "disk":
            if len(self.size) != 1:
                raise ValueError("disk takes a single radius")
        elif self.kind == "box":
            if len(self.size) != 2:
                raise ValueError("box takes two half-widths")
        else:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if any(s < 0 or not math.isfinite(s) for s in self.size):
            raise ValueError("shape sizes must be finite and non-negative")

    @classmethod
    def disk(cls, cx: float, cy: float, r: float) -> "ShapeSpec":
        return cls("disk", (cx, cy), (r,))

    @classmethod
    def box(cls, cx: float, cy: float, a: float, b: float) -> "ShapeSpec":
        return cls("box", (cx, cy), (a, b))

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the closure."""
        cx, cy = self.center
        if self.kind == "disk":
            a = b = self.size[0]
        else:
            a, b = self.size
        return cx - a, cx + a, cy - b, cy + b

    def area(self) -> float:
        if self.kind == "disk":
            return math.pi * self.size[0] ** 2
        return 4.0 * self.size[0] * self.size[1]

    def contains_points(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Strict interior test (a zero-size shape contains nothing)."""
        cx, cy = self.center
        if self.kind == "disk":
            return (x - cx) ** 2 + (y - cy) ** 2 < self.size[0] ** 2
        a, b = self.size
        return (np.abs(x - cx) < a) & (np.abs(y - cy) < b)

    def translated(self, ddx: float, ddy: float) -> "ShapeSpec":
        return ShapeSpec(self.kind, (self.center[0] + ddx, self.center[1] + ddy), self.size)

    def scaled(self, eps: float) -> "ShapeSpec":
        """The inclusion ``z + eps * C`` with ``z`` the shape's center."""
        return ShapeSpec(self.kind, self.center, tuple(eps * s for s in self.size))


@dataclass(frozen=True, eq=False)
class MaskField:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"mask shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", v.astype(bool))

    @property
    def count(self) -> int:
        return int(self.values.sum())

    @property
    def measure(self) -> float:
        return self.count * self.grid.cell_volume

    def __or__(self, other: "MaskField") -> "MaskField":
        return MaskField(self.grid, self.values | other.values)

    def __eq__(self, other):
        return (
            isinstance(other, MaskField)
            and self.grid == other.grid
            and np.array_equal(self.values, other.values)
        )


def _boundary_margin(grid: Grid, shape: ShapeSpec) -> float:
    xmin, xmax, ymin, ymax = shape.bounds()
    return min(xmin, grid.lx - xmax, ymin, grid.ly - ymax)


def rasterize(grid: Grid, shape: ShapeSpec, obstacle: bool = False) -> MaskField:
    """Flag every cell whose center lies strictly inside ``shape``.

    With ``obstacle=True`` the shape must keep a margin of two cells from
    the domain boundary.
    """
    if obstacle:
        margin = _boundary_margin(grid, shape)
        if margin < 2 * grid.h:
            raise LayoutError(
                "shape-touches-boundary",
                f"obstacle margin {margin:.4g} < 2*h = {2 * grid.h:.4g}",
            )
    x, y = grid.cell_centers()
    return MaskField(grid, shape.contains_points(x, y))


def union_mask(grid: Grid, shapes, obstacle: bool = False) -> MaskField:
    values = np.zeros(grid.shape, dtype=bool)
    for s in shapes:
        values |= rasterize(grid, s, obstacle=obstacle).values
    return MaskField(grid, values)


def _inside(inner: ShapeSpec, outer: ShapeSpec) -> bool:
    """Closure of ``inner`` strictly inside the open ``outer``."""
    if outer.kind == "box":
        xmin, xmax, ymin, ymax = inner.bounds()
        oxmin, oxmax, oymin, oymax = outer.bounds()
        return xmin > oxmin and xmax < oxmax and ymin > oymin and ymax < oymax
    ocx, ocy = outer.center
    R = outer.size[0]
    if inner.kind == "disk":
        d = math.hypot(inner.center[0] - ocx, inner.center[1] - ocy)
        return d + inner.size[0] < R
    xmin, xmax, ymin, ymax = inner.bounds()
    corners = [(xmin, ymin), (xmin, ymax), (xmax, ymin), (xmax, ymax)]
    return all(math.hypot(px - ocx, py - ocy) < R for px, py in corners)


def _box_disk_distance(box: ShapeSpec, px: float, py: float) -> float:
    xmin, xmax, ymin, ymax = box.bounds()
    qx = min(max(px, xmin), xmax)
    qy = min(max(py, ymin), ymax)
    return math.hypot(px - qx, py - qy)


def shapes_intersect(s1: ShapeSpec, s2: ShapeSpec) -> bool:
    """True when the open shapes overlap (touching boundaries is allowed)."""
    if s1.kind == "box" and s2.kind == "box":
        a = s1.bounds()
        b = s2.bounds()
        return min(a[1], b[1]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[2], b[2])
    if s1.kind == "disk" and s2.kind == "disk":
        d = math.hypot(s1.center[0] - s2.center[0], s1.center[1] - s2.center[1])
        return d < s1.size[0] + s2.size[0]
    box, disk = (s1, s2) if s1.kind == "box" else (s2, s1)
    return _box_disk_distance(box, *disk.center) < disk.size[0]


def validate_layout(obstacles, windows, holdall: ShapeSpec, grid: Grid) -> None:
    """Raise :class:`LayoutError` unless obstacles sit inside the hold-all,
    windows avoid it, and every shape is strictly inside the domain."""
    for shape in [holdall, *obstacles, *windows]:
        if _boundary_margin(grid, shape) <= 0:
            raise LayoutError("shape-touches-boundary", f"{shape} is not strictly inside the domain")
    for ob in obstacles:
        margin = _boundary_margin(grid, ob)
        if margin < 2 * grid.h:
            raise LayoutError(
                "shape-touches-boundary",
                f"obstacle {ob} margin {margin:.4g} < 2*h = {2 * grid.h:.4g}",
            )
        if not _inside(ob, holdall):
            raise LayoutError("obstacle-outside-holdall", f"{ob} is not strictly inside {holdall}")
    for w in windows:
        if shapes_intersect(w, holdall):
            raise LayoutError("window-intersects-holdall", f"window {w} overlaps {holdall}")


def perimeter(shape: ShapeSpec) -> float:
    if shape.kind == "disk":
        return 2.0 * math.pi * shape.size[0]
    a, b = shape.size
    return 4.0 * (a + b)


def mask_perimeter(mask: MaskField) -> float:
    """Length of the flagged/unflagged interface, counting domain-boundary edges."""
    v = np.pad(mask.values.astype(np.int8), 1)
    vertical_edges = np.abs(np.diff(v, axis=0)).sum()  # faces normal to x
    horizontal_edges = np.abs(np.diff(v, axis=1)).sum()
    return float(vertical_edges * mask.grid.dy + horizontal_edges * mask.grid.dx)
