"""Supplementary run, not part of the acceptance suite: weak (1, 2) vortex
forcing with four windows framing the hold-all, no lid.

Localizes a centered obstacle (by symmetry) but not off-center ones.

    python3 scripts/frame_window_vortex.py
"""

from topoflow import experiments as ex
from topoflow.grid import ShapeSpec
from topoflow.ns_solver import BoundarySpec, ForcingSpec

H = 1 / 96
M = 0.04  # margin to the walls


def frame(half=0.25):
    lo, hi = 0.5 - half, 0.5 + half
    return (
        ShapeSpec.box(0.5, (hi + 1 - M) / 2, (1 - 2 * M) / 2, (1 - M - hi) / 2),
        ShapeSpec.box(0.5, (M + lo) / 2, (1 - 2 * M) / 2, (lo - M) / 2),
        ShapeSpec.box((M + lo) / 2, 0.5, (lo - M) / 2, half),
        ShapeSpec.box((hi + 1 - M) / 2, 0.5, (lo - M) / 2, half),
    )


def box(i, j):
    return ShapeSpec.box(i * H, j * H, 2 * H, 2 * H)


if __name__ == "__main__":
    layouts = {"center": [box(48, 48)], "off-center": [box(40, 56)], "three": [box(36, 38), box(60, 38), box(48, 60)]}
    for name, obs in layouts.items():
        spec = ex.canonical_twin(obs, windows=frame(), boundary=BoundarySpec(),
                                 forcing=ForcingSpec("analytic-vortex", 0.002, wavenumbers=(1, 2)))
        rep = ex.run_detection(spec)
        d = [ex.nearest_distance(rep, o.center) / H for o in obs]
        print(f"{name}: {rep.n_detected} cluster(s) at {[c.argmin for c in rep.clusters]}, "
              f"nearest distances {[round(x, 1) for x in d]} cells")
