"""Test configuration and fixtures."""

import tempfile
from pathlib import Path

import numpy as np
import pytest
from typer.testing import CliRunner

from junctionflow.config import Numerics, write_default_config
from junctionflow.edge_transport import BoundaryData
from junctionflow.expressions import Expression
from junctionflow.geometry import NetworkSpec, build_rescaled_node
from junctionflow.velocity import EdgeVelocity, VelocityField


@pytest.fixture
def runner():
    """CLI test runner fixture."""
    return CliRunner()


@pytest.fixture
def spec():
    """Default junction: alpha = 0.5, gamma = 0.85, eps = 0.1."""
    return NetworkSpec()


@pytest.fixture
def velocity(spec):
    """Constant edge speeds (-2, 1, 1), conservative for equal radii."""
    return VelocityField(
        spec,
        (
            EdgeVelocity.constant(1, -2.0),
            EdgeVelocity.constant(2, 1.0),
            EdgeVelocity.constant(3, 1.0),
        ),
    )


@pytest.fixture
def default_data(spec):
    """The data of the default scenario."""
    q = (
        Expression("step(t, 0, 0.5)", ("t",)),
        Expression("0.5*step(t, 0, 0.5)", ("t",)),
        Expression("0.5*step(t, 0, 0.5)", ("t",)),
    )
    lateral = "step(t, 0, 0.5)*plateau(x, 0.3, 0.4, 0.6, 0.7)"
    phi = tuple(Expression(lateral, ("theta", "x", "t")) for _ in range(3))
    phi0 = Expression("0.5*step(t, 0, 0.5)*step(-xi1, 0.2, 0.25)", ("xi1", "xi2", "xi3", "t"))
    return BoundaryData(q, phi, phi0, spec.h)


@pytest.fixture
def zero_data(spec):
    """Homogeneous data."""
    return BoundaryData.zeros(spec.h)


@pytest.fixture
def small_numerics():
    """Coarse grids that keep a full expansion build at desk scale."""
    return Numerics(
        edge_nx=40,
        edge_nt=41,
        n_quad=8,
        disk_nr=8,
        disk_ntheta=16,
        node_spacing=0.1,
        trunc_len=2.0,
        node_samples=6,
        node_solver="direct",
    )


@pytest.fixture
def node_mesh(spec):
    """Coarse rescaled node domain."""
    return build_rescaled_node(spec, 1.5, 0.1)


@pytest.fixture
def edge_grids():
    """Small space and time grids for one edge."""
    return np.linspace(0.0, 1.0, 41), np.linspace(0.0, 1.0, 41)


@pytest.fixture
def config_file():
    """Default scenario written to a temporary file."""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield write_default_config(Path(temp_dir) / "junctionflow.ini")
