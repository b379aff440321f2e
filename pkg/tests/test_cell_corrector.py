"""Tests for the disk Neumann solver and the cell correctors."""

import numpy as np
import pytest

from junctionflow.cell_corrector import (
    DiskGrid,
    build_corrector,
    disk_values,
    evaluate_modes,
    solve_disk_neumann,
)
from junctionflow.errors import IncompatibleData
from junctionflow.expressions import Expression
from junctionflow.orders import BASE_INTEGER, FIRST_INTERACTION
from junctionflow.velocity import EdgeVelocity


@pytest.fixture
def grid():
    """Polar grid of the default cylinder radius."""
    return DiskGrid(0.2, n_r=32, n_theta=32)


def test_grid_weights_cover_the_disk(grid):
    """Cell areas add up to the disk area."""
    assert grid.weights.sum() == pytest.approx(grid.area, rel=1e-12)
    assert grid.mean(np.ones((grid.n_r, grid.n_theta))) == pytest.approx(1.0)


def test_radial_solution_is_exact(grid):
    """Laplace u = 1 with flux h/2 gives r^2/4 up to a constant, exactly at cell centres."""
    modes = solve_disk_neumann(np.ones((grid.n_r, grid.n_theta)), np.full(grid.n_theta, 0.1), grid)
    u = disk_values(modes, grid)
    expected = grid.r**2 / 4.0
    assert np.allclose(u[:, 0] - u[0, 0], expected - expected[0], atol=1e-13)
    assert np.allclose(u, u[:, :1], atol=1e-13)
    assert abs(grid.mean(u)) < 1e-13


def test_first_harmonic(grid):
    """Zero source with flux cos(theta) gives r cos(theta)."""
    modes = solve_disk_neumann(np.zeros((grid.n_r, grid.n_theta)), np.cos, grid)
    u = disk_values(modes, grid)
    rr, tt = np.meshgrid(grid.r, grid.theta, indexing="ij")
    assert np.max(np.abs(u - rr * np.cos(tt))) < 1e-3


def test_incompatible_data(grid):
    """A source without matching boundary flux is refused."""
    with pytest.raises(IncompatibleData) as info:
        solve_disk_neumann(np.ones((grid.n_r, grid.n_theta)), np.zeros(grid.n_theta), grid)
    assert info.value.defect == pytest.approx(np.pi * 0.2**2, rel=1e-10)


def test_evaluate_modes_matches_grid(grid):
    """Point evaluation at cell centres reproduces the grid values."""
    modes = solve_disk_neumann(np.zeros((grid.n_r, grid.n_theta)), lambda th: np.cos(2 * th), grid)
    u = disk_values(modes, grid)
    rr, tt = np.meshgrid(grid.r, grid.theta, indexing="ij")
    assert np.allclose(evaluate_modes(modes, grid, rr, tt), u, atol=1e-13)


def test_base_orders_have_no_corrector(grid):
    """Correctors of the base orders vanish."""
    x = np.linspace(0.0, 1.0, 11)
    t = np.linspace(0.0, 1.0, 11)
    field = build_corrector(BASE_INTEGER, 2, grid, x, t, EdgeVelocity.constant(2, 1.0), None, None, None)
    assert field.is_zero
    assert not np.any(field(np.array([0.5]), np.array([0.1]), np.array([0.0]), np.array([0.5])))


def test_first_interaction_corrector_constant_flux(grid):
    """A constant lateral flux gives -phi r^2 / (2h) up to a zero-mean constant."""
    x = np.linspace(0.0, 1.0, 11)
    t = np.linspace(0.0, 1.0, 11)
    phi = Expression("step(t, 0, 0.5)*plateau(x, 0.3, 0.4, 0.6, 0.7)", ("theta", "x", "t"))
    field = build_corrector(FIRST_INTERACTION, 2, grid, x, t, EdgeVelocity.constant(2, 1.0), None, None, None, phi=phi)
    assert not field.is_zero
    u = field.slice(5, 8)
    expected = -(grid.r**2) / (2.0 * grid.radius)
    assert np.allclose(u[:, 0] - u[0, 0], expected - expected[0], atol=1e-12)
    assert abs(grid.mean(u)) < 1e-12
    assert not np.any(field.slice(0, 8))
    assert not np.any(field.slice(5, 0))


def test_first_interaction_corrector_harmonic_flux(grid):
    """An angular lateral flux gives a harmonic corrector; point evaluation follows the slices."""
    x = np.linspace(0.0, 1.0, 11)
    t = np.linspace(0.0, 1.0, 11)
    phi = Expression("cos(theta)*step(t, 0, 0.5)*plateau(x, 0.3, 0.4, 0.6, 0.7)", ("theta", "x", "t"))
    field = build_corrector(FIRST_INTERACTION, 2, grid, x, t, EdgeVelocity.constant(2, 1.0), None, None, None, phi=phi)
    r = grid.r[10]
    theta = grid.theta[3]
    value = field(np.array([0.5]), np.array([r]), np.array([theta]), np.array([0.8]))
    assert value[0] == pytest.approx(-r * np.cos(theta), abs=1e-3)
    assert field.solved_slices() >= 1
    frame = field.slice_frame(5, 8)
    assert list(frame.columns) == ["r", "theta", "u"]
