"""One-shot obstacle detection in a 2-D incompressible flow from interior
velocity data, via the topological gradient of a least-squares misfit."""

from .adjoint import AdjointTrajectory, MeasurementSet, solve_adjoint
from .detection import DetectionReport, estimate_extent, find_clusters, score
from .experiments import (
    RateResult,
    TwinSpec,
    adjoint_gradient_check,
    canonical_twin,
    run_detection,
    run_twin,
    separation_study,
    synth_measurements,
    verify_expansion,
    verify_penalization_rate,
    verify_perturbation_decay,
)
from .grid import Grid, LayoutError, MaskField, ShapeSpec, build_grid, rasterize, validate_layout
from .ns_solver import (
    BoundarySpec,
    ForcingSpec,
    ScalarField,
    SolverConfig,
    StaggeredVelocity,
    Trajectory,
    solve_forward,
    step_forward,
)
from .sensitivity import SensitivityField, cost, cost_regularized, topological_gradient

__version__ = "0.1.0"
