import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from topoflow.adjoint import MeasurementSet, check_time_grids, misfit_source, solve_adjoint
from topoflow.grid import ShapeSpec, build_grid, rasterize
from topoflow.mac import build_operators
from topoflow.ns_solver import BoundarySpec, ForcingSpec, ScalarField, SolverConfig, sample_windows, solve_forward
from topoflow.sensitivity import cost, discrete_kappa_gradient

GRID = build_grid(12, 12, 1.0, 1.0)
CFG = SolverConfig(T=0.15)
BC = BoundarySpec("lid", t_ramp=0.05)


@pytest.fixture(scope="module")
def base():
    window = rasterize(GRID, ShapeSpec.box(0.5, 0.83, 0.3, 0.1))
    u0 = solve_forward(CFG, ScalarField.zeros(GRID), ForcingSpec(), BC, keep_stars=True)
    truth_k = np.zeros(GRID.shape)
    truth_k[5:7, 4:6] = 30.0
    ut = solve_forward(CFG, ScalarField(GRID, truth_k), ForcingSpec(), BC, record=[window], times=u0.times)
    meas = MeasurementSet([window], u0.times, ut.samples)
    return u0, meas


def test_measurement_shape_checked():
    w = rasterize(GRID, ShapeSpec.box(0.5, 0.5, 0.1, 0.1))
    with pytest.raises(ValueError):
        MeasurementSet([w], np.array([0.0, 1.0]), [np.zeros((2, w.count + 1, 2))])


def test_time_grid_mismatch_rejected():
    with pytest.raises(ValueError):
        check_time_grids(np.array([0.0, 0.5, 1.0]), np.array([0.0, 0.4, 1.0]))


def test_adjoint_needs_full_trajectory(base):
    u0, meas = base
    part = solve_forward(CFG, ScalarField.zeros(GRID), ForcingSpec(), BC, record=meas.windows)
    with pytest.raises(ValueError):
        solve_adjoint(part, meas, CFG, BC)


def test_zero_misfit_gives_zero_adjoint(base):
    u0, meas = base
    ops = build_operators(GRID)
    exact = [np.stack([sample_windows(ops, s, meas.windows)[0] for s in u0.data])]
    v0 = solve_adjoint(u0, MeasurementSet(meas.windows, u0.times, exact), CFG, BC)
    assert not v0.data.any()
    assert not misfit_source(u0.data[3], [e[3] for e in exact], meas.windows).any()


def test_terminal_condition_and_shape(base):
    u0, meas = base
    v0 = solve_adjoint(u0, meas, CFG, BC)
    assert v0.data.shape == u0.data.shape
    assert not v0.data[-1].any()
    assert np.abs(v0.data[0]).max() > 0


@given(st.floats(-4, 4).filter(lambda s: abs(s) > 1e-3))
def test_adjoint_linear_in_residual(base, scale):
    u0, meas = base
    ops = build_operators(GRID)
    clean = np.stack([sample_windows(ops, s, meas.windows)[0] for s in u0.data])
    resid = meas.samples[0] - clean
    v1 = solve_adjoint(u0, MeasurementSet(meas.windows, u0.times, [clean + resid]), CFG, BC)
    vs = solve_adjoint(u0, MeasurementSet(meas.windows, u0.times, [clean + scale * resid]), CFG, BC)
    assert np.allclose(vs.data, scale * v1.data, rtol=1e-9, atol=1e-14)


def test_adjoint_projected_divergence_free(base):
    u0, meas = base
    v0 = solve_adjoint(u0, meas, CFG, BC)
    ops = build_operators(GRID)
    assert np.abs(ops.Div @ v0.data.T).max() < 1e-8


def test_discrete_gradient_matches_finite_differences(base):
    u0, meas = base
    v0 = solve_adjoint(u0, meas, CFG, BC)
    grad = discrete_kappa_gradient(u0, v0).values
    k0 = cost(u0, meas)
    for cell in [(3, 3), (6, 5), (8, 4)]:
        a = 1e-4
        k = np.zeros(GRID.shape)
        k[cell] = a
        up = solve_forward(CFG, ScalarField(GRID, k), ForcingSpec(), BC, times=u0.times)
        fd = (cost(up, meas) - k0) / a
        assert fd == pytest.approx(grad[cell], rel=1e-3)
