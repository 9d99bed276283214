import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from topoflow.detection import estimate_extent, find_clusters, score, with_extents
from topoflow.grid import ShapeSpec, build_grid
from topoflow.ns_solver import ScalarField

G = build_grid(32, 32, 1.0, 1.0)


def field(values):
    return ScalarField(G, np.asarray(values, float))


def spikes(*cells, depth=-1.0):
    v = np.full(G.shape, 0.01)
    for c in cells:
        v[c] = depth
    return v


def test_all_positive_means_no_detection():
    rep = find_clusters(field(np.full(G.shape, 0.3)))
    assert rep.no_detection and rep.n_detected == 0
    assert rep.to_dict()["no_detection"] is True


def test_single_spike():
    rep = find_clusters(field(spikes((7, 20))))
    assert rep.n_detected == 1
    c = rep.clusters[0]
    assert c.argmin == (7, 20) and c.size == 1
    assert c.center == pytest.approx((7.5 / 32, 20.5 / 32))


def test_two_spikes_far_apart_are_two_clusters():
    rep = find_clusters(field(spikes((5, 5), (15, 5))))
    assert rep.n_detected == 2


def test_adjacent_spikes_merge():
    rep = find_clusters(field(spikes((5, 5), (6, 5))))
    assert rep.n_detected == 1 and rep.clusters[0].size == 2


def test_diagonal_neighbours_do_not_connect():
    assert find_clusters(field(spikes((5, 5), (6, 6)))).n_detected == 2


def test_region_restricts_search_and_threshold():
    v = spikes((3, 3), depth=-5.0)
    v[20, 20] = -1.0
    from topoflow.grid import rasterize

    region = rasterize(G, ShapeSpec.box(0.65, 0.65, 0.1, 0.1))
    rep = find_clusters(field(v), region=region)
    assert [c.argmin for c in rep.clusters] == [(20, 20)]
    assert rep.field_min == -1.0


def test_alpha_validated():
    for a in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            find_clusters(field(spikes((1, 1))), alpha=a)


def test_nonfinite_rejected():
    v = spikes((1, 1))
    v[2, 2] = np.nan
    with pytest.raises(ValueError):
        find_clusters(field(v))


def _pit(std_cells, ci=16, cj=16):
    i, j = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    r2 = (i - ci) ** 2 + (j - cj) ** 2
    return -np.exp(-r2 / (2 * std_cells**2)), r2


def test_extent_beta_limits():
    v, _ = _pit(2.0)
    dk = field(v)
    rep = find_clusters(dk, alpha=0.01)
    c = rep.clusters[0]
    assert estimate_extent(dk, c, 1.0).count == 1
    assert estimate_extent(dk, c, 1e-12).count == c.size


def test_gaussian_pit_extent():
    v, r2 = _pit(3.0)
    dk = field(v)
    rep = with_extents(dk, find_clusters(dk, alpha=0.01), beta=math.exp(-0.5))
    ext = rep.clusters[0].extent
    # oracle: lattice points with r <= 3, counted directly
    assert ext.count == int((r2 <= 9).sum()) == 29
    assert ext.area == pytest.approx(math.pi * (3 * G.dx) ** 2, rel=0.5)
    assert ext.bbox == (13, 19, 13, 19)
    assert rep.beta == pytest.approx(math.exp(-0.5))


def test_beta_validated():
    v, _ = _pit(2.0)
    rep = find_clusters(field(v))
    with pytest.raises(ValueError):
        estimate_extent(field(v), rep.clusters[0], 0.0)


def test_score_examples():
    rep = find_clusters(field(spikes((5, 5), (20, 20))))
    truth = [ShapeSpec.box(5.5 / 32, 6.5 / 32, 0.02, 0.02), ShapeSpec.disk(0.9, 0.1, 0.02)]
    score(rep, truth)
    m = rep.scores.matches
    assert m[0].matched and m[0].distance == pytest.approx(1 / 32)
    assert not m[1].matched
    assert rep.scores.n_matched == 1 and rep.scores.n_missed == 1
    assert rep.scores.spurious == [1]
    assert rep.scores.match_radius == pytest.approx(3 / 32)


def test_score_greedy_takes_closest_pair_first():
    rep = find_clusters(field(spikes((10, 10), (13, 10))))
    # b sits on cluster (13, 10); a is 1 cell from it and 2 from (10, 10)
    a = ShapeSpec.disk(12.5 / 32, 10.5 / 32, 0.01)
    b = ShapeSpec.disk(13.5 / 32, 10.5 / 32, 0.01)
    score(rep, [a, b], match_radius=5 / 32)
    by_truth = {m.truth: m.cluster for m in rep.scores.matches}
    c13 = [c.argmin for c in rep.clusters].index((13, 10))
    assert by_truth[1] == c13 and by_truth[0] == 1 - c13


def test_report_dict_has_thresholds_and_seed():
    rep = find_clusters(field(spikes((4, 4))), alpha=0.4)
    rep.seed = 9
    score(rep, [ShapeSpec.disk(0.14, 0.14, 0.01)])
    d = rep.to_dict()
    assert d["thresholds"]["alpha"] == 0.4 and d["seed"] == 9
    assert tuple(d["clusters"][0]["argmin"]) == (4, 4)


fields = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).standard_normal(G.shape))


@given(fields, st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_candidates_shrink_as_alpha_grows(v, a1, a2):
    lo, hi = sorted((a1, a2))
    assert find_clusters(field(v), lo).candidates >= find_clusters(field(v), hi).candidates


@given(fields, st.floats(1e-3, 1e3))
def test_positive_scaling_invariance(v, s):
    a, b = find_clusters(field(v)), find_clusters(field(s * v))
    assert [c.argmin for c in a.clusters] == [c.argmin for c in b.clusters]
    assert [c.size for c in a.clusters] == [c.size for c in b.clusters]


@given(st.integers(0, 2**32 - 1), st.integers(-5, 5), st.integers(-5, 5))
def test_translation_moves_argmins(seed, di, dj):
    rng = np.random.default_rng(seed)
    v = np.full(G.shape, 0.5)
    v[8:24, 8:24] = rng.standard_normal((16, 16))
    shifted = np.roll(v, (di, dj), axis=(0, 1))
    a, b = find_clusters(field(v)), find_clusters(field(shifted))
    assert [(i + di, j + dj) for i, j in (c.argmin for c in a.clusters)] == [c.argmin for c in b.clusters]


@given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 31)), min_size=2, max_size=6, unique=True))
def test_tie_break_lowest_linear_index(cells):
    v = np.full(G.shape, -0.9)  # one big connected cluster
    for c in cells:
        v[c] = -1.0
    rep = find_clusters(field(v))
    want = min(cells, key=lambda c: c[1] * G.nx + c[0])
    assert rep.clusters[0].argmin == want
