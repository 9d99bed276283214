"""Thresholded clusters of negative sensitivity and their scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import Grid, MaskField, ShapeSpec

_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass
class Extent:
    cells: np.ndarray = field(repr=False)  # (m, 2) integer (i, j)
    bbox: tuple[int, int, int, int]  # i0, i1, j0, j1 inclusive
    bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    area: float

    @property
    def count(self) -> int:
        return len(self.cells)

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox), "bounds": list(self.bounds), "area": self.area, "count": self.count}


@dataclass
class Cluster:
    argmin: tuple[int, int]
    center: tuple[float, float]
    min_value: float
    cells: np.ndarray = field(repr=False)
    extent: Extent | None = None

    @property
    def size(self) -> int:
        return len(self.cells)

    def to_dict(self) -> dict:
        d = {
            "argmin": list(self.argmin),
            "center": list(self.center),
            "min_value": self.min_value,
            "size": self.size,
            "cells": self.cells.tolist(),
        }
        if self.extent is not None:
            d["extent"] = self.extent.to_dict()
        return d


@dataclass
class Match:
    truth: int
    cluster: int | None
    distance: float | None

    @property
    def matched(self) -> bool:
        return self.cluster is not None

    def to_dict(self) -> dict:
        return {"truth": self.truth, "cluster": self.cluster, "distance": self.distance, "matched": self.matched}


@dataclass
class Scores:
    matches: list[Match]
    spurious: list[int]
    match_radius: float

    @property
    def n_matched(self) -> int:
        return sum(m.matched for m in self.matches)

    @property
    def n_missed(self) -> int:
        return len(self.matches) - self.n_matched

    def to_dict(self) -> dict:
        return {
            "match_radius": self.match_radius,
            "matches": [m.to_dict() for m in self.matches],
            "spurious": list(self.spurious),
            "n_matched": self.n_matched,
            "n_missed": self.n_missed,
            "n_spurious": len(self.spurious),
        }


@dataclass
class DetectionReport:
    grid: Grid
    clusters: list[Cluster]
    alpha: float
    beta: float | None = None
    candidates: int = 0
    field_min: float = 0.0
    scores: Scores | None = None
    seed: int | None = None
    sigma: float | None = None

    @property
    def no_detection(self) -> bool:
        return not self.clusters

    @property
    def n_detected(self) -> int:
        return len(self.clusters)

    @property
    def n_true(self) -> int:
        return 0 if self.scores is None else len(self.scores.matches)

    def to_dict(self) -> dict:
        g = self.grid
        return {
            "grid": {"nx": g.nx, "ny": g.ny, "lx": g.lx, "ly": g.ly},
            "thresholds": {
                "alpha": self.alpha,
                "beta": self.beta,
                "match_radius": None if self.scores is None else self.scores.match_radius,
            },
            "seed": self.seed,
            "sigma": self.sigma,
            "no_detection": self.no_detection,
            "field_min": self.field_min,
            "candidates": self.candidates,
            "n_detected": self.n_detected,
            "n_true": self.n_true,
            "clusters": [c.to_dict() for c in self.clusters],
            "scores": None if self.scores is None else self.scores.to_dict(),
        }


def _values(dk) -> np.ndarray:
    return np.asarray(getattr(dk, "values", dk), dtype=float)


def _grid(dk) -> Grid:
    return dk.grid


def _first_min(values: np.ndarray, cells: np.ndarray, nx: int) -> int:
    """Row of ``cells`` holding the minimum; ties go to the lowest j * nx + i."""
    v = values[cells[:, 0], cells[:, 1]]
    lin = cells[:, 1] * nx + cells[:, 0]
    return int(np.lexsort((lin, v))[0])


def find_clusters(dk, alpha: float = 0.5, region: MaskField | None = None) -> DetectionReport:
    """4-connected components of ``{D_K <= alpha * min D_K, D_K < 0}``.

    ``region`` restricts the search (for instance to the hold-all); the
    minimum used for the threshold is then taken over the region only.
    Clusters are ordered by their minimum, deepest first.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    grid = _grid(dk)
    v = _values(dk)
    if not np.all(np.isfinite(v)):
        raise ValueError("sensitivity field has non-finite values")
    allowed = np.ones(v.shape, bool) if region is None else region.values
    vmin = float(v[allowed].min()) if allowed.any() else 0.0
    if vmin >= 0.0:
        return DetectionReport(grid, [], alpha, field_min=vmin)
    cand = allowed & (v <= alpha * vmin) & (v < 0.0)
    labels, n = ndimage.label(cand, structure=_FOUR)
    clusters = []
    for lab in range(1, n + 1):
        cells = np.argwhere(labels == lab)
        k = _first_min(v, cells, grid.nx)
        i, j = (int(c) for c in cells[k])
        clusters.append(Cluster((i, j), grid.center_of(i, j), float(v[i, j]), cells))
    clusters.sort(key=lambda c: (c.min_value, c.argmin[1] * grid.nx + c.argmin[0]))
    return DetectionReport(grid, clusters, alpha, candidates=int(cand.sum()), field_min=vmin)


def estimate_extent(dk, cluster: Cluster, beta: float = 0.5) -> Extent:
    """Cells of the cluster with ``D_K <= beta * cluster min``."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    grid = _grid(dk)
    v = _values(dk)
    vals = v[cluster.cells[:, 0], cluster.cells[:, 1]]
    cells = cluster.cells[vals <= beta * cluster.min_value]
    i0, j0 = (int(c) for c in cells.min(axis=0))
    i1, j1 = (int(c) for c in cells.max(axis=0))
    bounds = (i0 * grid.dx, (i1 + 1) * grid.dx, j0 * grid.dy, (j1 + 1) * grid.dy)
    return Extent(cells, (i0, i1, j0, j1), bounds, len(cells) * grid.cell_volume)


def with_extents(dk, report: DetectionReport, beta: float = 0.5) -> DetectionReport:
    for c in report.clusters:
        c.extent = estimate_extent(dk, c, beta)
    report.beta = beta
    return report


def score(report: DetectionReport, truth: list[ShapeSpec], match_radius: float | None = None) -> DetectionReport:
    """Greedy nearest matching of cluster argmins to true centers.

    Pairs are taken in order of increasing distance; each truth and each
    cluster is used at most once. Default radius is three cells.
    """
    grid = report.grid
    if match_radius is None:
        match_radius = 3.0 * grid.h
    pairs = []
    for t, shape in enumerate(truth):
        for c, cl in enumerate(report.clusters):
            d = math.hypot(cl.center[0] - shape.center[0], cl.center[1] - shape.center[1])
            if d <= match_radius:
                pairs.append((d, t, c))
    pairs.sort()
    taken_t: dict[int, tuple[int, float]] = {}
    taken_c: set[int] = set()
    for d, t, c in pairs:
        if t in taken_t or c in taken_c:
            continue
        taken_t[t] = (c, d)
        taken_c.add(c)
    matches = [
        Match(t, *taken_t[t]) if t in taken_t else Match(t, None, None) for t in range(len(truth))
    ]
    spurious = [c for c in range(len(report.clusters)) if c not in taken_c]
    report.scores = Scores(matches, spurious, float(match_radius))
    return report
