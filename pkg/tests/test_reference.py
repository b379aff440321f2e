"""Tests for the finite-volume reference solver."""

import numpy as np
import pytest

from junctionflow.edge_transport import BoundaryData
from junctionflow.errors import CFLAccuracyWarning, SpacingTooCoarse
from junctionflow.expressions import Expression
from junctionflow.geometry import NetworkSpec, build_thin_junction
from junctionflow.reference import reference_mesh, solve_reference
from junctionflow.velocity import EdgeVelocity, VelocityField


@pytest.fixture(scope="module")
def thick_spec():
    """A thick junction whose voxel mesh stays small."""
    return NetworkSpec(eps=0.5)


@pytest.fixture(scope="module")
def thick_mesh(thick_spec):
    """Voxel mesh with four cells across the radius."""
    return build_thin_junction(thick_spec, 0.025)


@pytest.fixture(scope="module")
def thick_velocity(thick_spec):
    """Constant edge speeds (-2, 1, 1)."""
    return VelocityField(
        thick_spec,
        (
            EdgeVelocity.constant(1, -2.0),
            EdgeVelocity.constant(2, 1.0),
            EdgeVelocity.constant(3, 1.0),
        ),
    )


def _scaled(data: BoundaryData, factor: float) -> BoundaryData:
    def scale(e: Expression) -> Expression:
        return Expression(f"{factor}*({e.text})", e.variables)

    return BoundaryData(
        tuple(scale(e) for e in data.q),  # type: ignore[arg-type]
        tuple(scale(e) for e in data.phi),  # type: ignore[arg-type]
        scale(data.phi0),
        data.radii,
    )


def test_reference_mesh_needs_resolution(thick_spec):
    """Fewer than six cells across a radius are refused."""
    with pytest.raises(SpacingTooCoarse):
        reference_mesh(thick_spec, 4)


def test_unknown_scheme(thick_spec, thick_mesh, thick_velocity, default_data):
    """Only implicit Euler and BDF2 are offered."""
    with pytest.raises(ValueError):
        solve_reference(thick_spec, default_data, thick_mesh, 0.1, thick_velocity, scheme="crank-nicolson")


def test_zero_data_stay_zero(thick_spec, thick_mesh, thick_velocity, zero_data):
    """Homogeneous data and zero initial value give the zero solution."""
    solution = solve_reference(thick_spec, zero_data, thick_mesh, 0.25, thick_velocity, limiter=False)
    assert not np.any(solution.values)
    assert solution.max_ledger_defect == 0.0
    assert solution.temporal_error_estimate == 0.0
    assert len(solution.times) == 5


def test_ledger_closes_without_limiter(thick_spec, thick_mesh, thick_velocity, default_data):
    """Storage change balances the boundary fluxes to round-off."""
    solution = solve_reference(thick_spec, default_data, thick_mesh, 0.1, thick_velocity, limiter=False)
    assert solution.max_ledger_defect < 1e-9
    assert list(solution.ledger.columns) == [
        "step",
        "t",
        "storage_rate",
        "robin_flux",
        "dirichlet_flux",
        "defect",
        "relative_defect",
    ]
    assert len(solution.ledger) == 10
    assert not np.any(solution.values[0])
    assert np.any(solution.values[-1])
    assert solution.surface_area_defect < 1e-12


def test_linear_without_limiter(thick_spec, thick_mesh, thick_velocity, default_data):
    """Without the limiter the scheme is linear in the data."""
    once = solve_reference(thick_spec, default_data, thick_mesh, 0.2, thick_velocity, limiter=False)
    twice = solve_reference(thick_spec, _scaled(default_data, 2.0), thick_mesh, 0.2, thick_velocity, limiter=False)
    assert np.allclose(twice.values, 2.0 * once.values, rtol=1e-10, atol=1e-14)


def test_store_every_and_tables(thick_spec, thick_mesh, thick_velocity, default_data):
    """Stored steps, snapshots, point series and point evaluation agree."""
    solution = solve_reference(
        thick_spec, default_data, thick_mesh, 0.1, thick_velocity, limiter=False, store_every=5
    )
    assert solution.times == pytest.approx([0.0, 0.5, 1.0])
    frame = solution.snapshot_frame(2)
    assert list(frame.columns) == ["x", "y", "z", "region", "t", "u"]
    assert len(frame) == thick_mesh.n_cells
    points = np.array([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [5.0, 5.0, 5.0]])
    series = solution.point_series(points)
    assert list(series.columns) == ["t", "p0", "p1", "p2"]
    assert series["p2"].isna().all()
    cell = thick_mesh.locate(points[:1])[0]
    assert series["p0"].iloc[-1] == solution.values[-1, cell]
    centre = thick_mesh.centers[cell : cell + 1]
    assert solution.at(centre, 1.0) == pytest.approx([solution.values[-1, cell]], abs=1e-12)
    assert not np.any(solution.at(centre, 0.0))


def test_coarse_time_step_warns(thick_spec, thick_mesh, thick_velocity, default_data):
    """A time step too coarse for the accuracy target raises a warning."""
    with pytest.warns(CFLAccuracyWarning):
        solution = solve_reference(
            thick_spec, default_data, thick_mesh, 0.25, thick_velocity, limiter=False, accuracy_target=1e-8
        )
    assert solution.temporal_error_estimate > 1e-8


@pytest.mark.slow
def test_limited_scheme_conserves(thick_spec, thick_mesh, thick_velocity, default_data):
    """The limited scheme keeps the ledger closed to the solver tolerance."""
    solution = solve_reference(thick_spec, default_data, thick_mesh, 0.05, thick_velocity)
    assert solution.max_ledger_defect < 1e-8
    assert np.all(np.isfinite(solution.values))


@pytest.mark.slow
def test_bdf2_close_to_euler(thick_spec, thick_mesh, thick_velocity, default_data):
    """BDF2 closes the ledger and stays close to implicit Euler on a fine step."""
    euler = solve_reference(thick_spec, default_data, thick_mesh, 0.02, thick_velocity, limiter=False)
    bdf2 = solve_reference(thick_spec, default_data, thick_mesh, 0.02, thick_velocity, scheme="bdf2", limiter=False)
    assert bdf2.scheme == "bdf2"
    assert bdf2.max_ledger_defect < 1e-9
    scale = np.max(np.abs(euler.values[-1]))
    assert np.max(np.abs(bdf2.values[-1] - euler.values[-1])) < 0.2 * scale
