import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from topoflow.grid import ShapeSpec, build_grid
from topoflow.ns_solver import BoundarySpec, SolverConfig

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return build_grid(16, 12, 1.0, 0.75)


@pytest.fixture(scope="session")
def tiny_twin():
    """24 x 24 lid cavity with one 2 x 2-cell obstacle; cheap enough for unit tests."""
    from topoflow.experiments import TwinSpec
    from topoflow.ns_solver import ForcingSpec

    g = build_grid(24, 24, 1.0, 1.0)
    return TwinSpec(
        grid=g,
        solver=SolverConfig(T=0.5),
        forcing=ForcingSpec(),
        boundary=BoundarySpec("lid", t_ramp=0.1),
        obstacles=(ShapeSpec.box(0.5, 0.5, 1 / 24, 1 / 24),),
        holdall=ShapeSpec.box(0.5, 0.5, 0.25, 0.25),
        windows=(ShapeSpec.box(0.5, 0.875, 0.3, 0.08),),
    )


@pytest.fixture(scope="session")
def tiny_result(tiny_twin):
    from topoflow.experiments import run_twin

    return run_twin(tiny_twin)


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(n, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
