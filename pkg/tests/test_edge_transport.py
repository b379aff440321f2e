"""Tests for the transport problems on the limit graph."""

import numpy as np
import pytest

from junctionflow.edge_transport import (
    BoundaryData,
    EdgeField,
    TimeSignal,
    average_lateral_interaction,
    continuity_defect,
    kirchhoff_defect,
    solve_edge_hyperbolic,
    solve_limit_problem_general,
    solve_limit_problem_negative_orders,
)
from junctionflow.errors import MatchingViolated, WrongSign
from junctionflow.expressions import Expression
from junctionflow.orders import BASE_INTEGER, FIRST_INTERACTION, Order
from junctionflow.velocity import EdgeVelocity

STEP = Expression("step(t, 0, 0.5)", ("t",))


def test_time_signal_interpolates_and_differentiates():
    """TimeSignal reproduces smooth samples and their derivatives."""
    t = np.linspace(0.0, 1.0, 41)
    signal = TimeSignal(t, t**3)
    assert signal(np.array([0.37])) == pytest.approx([0.37**3], abs=1e-10)
    assert signal(np.array([0.5]), derivative=1) == pytest.approx([0.75], abs=1e-8)
    assert signal.derivative(2)(np.array([0.5])) == pytest.approx([3.0], abs=1e-6)
    assert signal.max_abs() == pytest.approx(1.0)
    assert TimeSignal.zeros(t).is_zero


def test_clamped_time_signal():
    """A clamped signal starts at zero with zero slope and keeps its later samples."""
    t = np.linspace(0.0, 1.0, 6)
    values = np.sin(3.0 * t) + 1e-20
    signal = TimeSignal(t, values, clamped=True)
    assert signal(np.array([0.0]))[0] == 0.0
    assert signal(np.array([0.0]), derivative=1)[0] == pytest.approx(0.0, abs=1e-12)
    assert signal(t[1:]) == pytest.approx(values[1:], abs=1e-14)
    assert values[0] == 1e-20
    assert TimeSignal(t, values)(np.array([0.0]), derivative=1)[0] > 1.0


def test_time_signal_from_expression():
    """Signals can be sampled from expressions."""
    t = np.linspace(0.0, 1.0, 21)
    signal = TimeSignal.from_expression(t, STEP)
    assert signal.values[0] == 0.0
    assert signal.values[-1] == 1.0


def test_edge_field_evaluation():
    """EdgeField interpolates its grid values and exports a tidy frame."""
    x = np.linspace(0.0, 1.0, 21)
    t = np.linspace(0.0, 1.0, 11)
    xx, tt = np.meshgrid(x, t, indexing="ij")
    field = EdgeField(2, BASE_INTEGER, x, t, xx * tt)
    assert field(np.array([0.33]), np.array([0.5])) == pytest.approx([0.165], abs=1e-10)
    assert field(np.array([0.33]), np.array([0.5]), dx=1) == pytest.approx([0.5], abs=1e-8)
    assert field.trace(1.0).values == pytest.approx(t)
    frame = field.to_frame()
    assert list(frame.columns) == ["x", "t", "w"]
    assert len(frame) == len(x) * len(t)
    assert EdgeField.zeros(2, BASE_INTEGER, x, t).is_zero


def test_transport_inflow_is_carried(edge_grids):
    """With constant speed the inflow datum travels unchanged along characteristics."""
    x, t = edge_grids
    edge = EdgeVelocity.constant(2, 1.0)
    field = solve_edge_hyperbolic(2, edge, None, lambda s: STEP(t=s), x, t, bc_end="start")
    xx, tt = np.meshgrid(x, t, indexing="ij")
    exact = STEP(t=np.maximum(tt - xx, 0.0))
    assert np.max(np.abs(field.values - exact)) < 1e-10
    assert field.spot_check_defect < 1e-6


def test_transport_source_term(edge_grids):
    """A space-independent source integrates along each characteristic."""
    x, t = edge_grids
    edge = EdgeVelocity.constant(2, 1.0)
    field = solve_edge_hyperbolic(2, edge, lambda xs, ts: ts**2, np.zeros_like, x, t)
    xx, tt = np.meshgrid(x, t, indexing="ij")
    exact = (tt**3 - np.maximum(tt - xx, 0.0) ** 3) / 3.0
    assert np.max(np.abs(field.values - exact)) < 1e-10


def test_transport_negative_speed(edge_grids):
    """With negative speed the datum enters at the far end and is scaled by v_in / v."""
    x, t = edge_grids
    edge = EdgeVelocity.constant(1, -2.0)
    field = solve_edge_hyperbolic(1, edge, None, lambda s: STEP(t=s), x, t, bc_end="end")
    assert field.values[-1] == pytest.approx(STEP(t=t), abs=1e-12)
    arrival = STEP(t=np.maximum(t - 0.5, 0.0))
    assert field.values[0] == pytest.approx(arrival, abs=1e-10)


def test_lifted_field_reproduces_inflow_datum(edge_grids):
    """An inflow datum passed as lift is reproduced at the inflow end between grid times."""
    x, t = edge_grids
    edge = EdgeVelocity.constant(1, -2.0)
    field = solve_edge_hyperbolic(1, edge, None, lambda s: STEP(t=s), x, t, bc_end="end", lift=STEP)
    ts = np.linspace(0.0, 1.0, 97)
    end = np.full(ts.shape, 1.0)
    assert field(end, ts) == pytest.approx(STEP(t=ts), abs=1e-14)
    assert field(end, ts, dt=1) == pytest.approx(STEP.diff("t")(t=ts), abs=1e-10)
    plain = EdgeField(1, BASE_INTEGER, x, t, field.values)
    assert np.max(np.abs(plain(end, ts) - STEP(t=ts))) > 1e-10
    assert field(np.array([0.3]), np.array([0.8])) == pytest.approx(plain(np.array([0.3]), np.array([0.8])), abs=1e-4)


def test_transport_wrong_end(edge_grids):
    """A datum on the outflow end is refused."""
    x, t = edge_grids
    with pytest.raises(WrongSign):
        solve_edge_hyperbolic(2, EdgeVelocity.constant(2, 1.0), None, np.zeros_like, x, t, bc_end="end")


def test_transport_sign_change(edge_grids):
    """A velocity that changes sign on the edge is refused."""
    x, t = edge_grids
    edge = EdgeVelocity(2, Expression("x - 0.5", ("x",)), EdgeVelocity.constant(2, 1.0).v_transverse, -0.5, 0.1)
    with pytest.raises(WrongSign):
        solve_edge_hyperbolic(2, edge, None, np.zeros_like, x, t)


def test_transport_matching(edge_grids):
    """An inflow datum that does not vanish at t = 0 is refused."""
    x, t = edge_grids
    with pytest.raises(MatchingViolated):
        solve_edge_hyperbolic(2, EdgeVelocity.constant(2, 1.0), None, lambda s: 1.0 + 0.0 * s, x, t)


def test_average_lateral_interaction():
    """A constant interaction averages to 2 phi / h; the first harmonic averages to zero."""
    x = np.array([0.5])
    t = np.array([0.5])
    constant = average_lateral_interaction(Expression("3", ("theta", "x", "t")), 0.2)
    assert constant(x, t) == pytest.approx([30.0])
    harmonic = average_lateral_interaction(Expression("cos(theta)*t", ("theta", "x", "t")), 0.2)
    assert harmonic(x, t) == pytest.approx([0.0], abs=1e-12)


def test_negative_orders_continuity_and_kirchhoff(spec, velocity, default_data):
    """The base orders are continuous at the vertex and satisfy the homogeneous Kirchhoff condition."""
    grids = {i: np.linspace(0.0, 1.0, 41) for i in (1, 2, 3)}
    t = np.linspace(0.0, 1.0, 41)
    frac, integer = solve_limit_problem_negative_orders(spec, default_data, velocity.edges, grids, t, n_quad=8)
    for fields in (frac, integer):
        assert continuity_defect(fields) < 1e-10
        assert kirchhoff_defect(spec, fields, velocity.edges) < 1e-10
    assert not integer[1].is_zero
    assert integer[1].values[-1] == pytest.approx(default_data.q[0](t=t), abs=1e-12)


def test_negative_orders_zero_data(spec, velocity, zero_data):
    """Zero data give zero base coefficients."""
    grids = {i: np.linspace(0.0, 1.0, 21) for i in (1, 2, 3)}
    t = np.linspace(0.0, 1.0, 21)
    frac, integer = solve_limit_problem_negative_orders(spec, zero_data, velocity.edges, grids, t)
    assert all(f.is_zero for f in frac.values())
    assert all(f.is_zero for f in integer.values())


def test_general_order_meets_gluing_constant(spec, velocity):
    """Higher orders split the Kirchhoff datum d between the outflow edges."""
    x = np.linspace(0.0, 1.0, 41)
    t = np.linspace(0.0, 1.0, 41)
    prev = {i: EdgeField.zeros(i, BASE_INTEGER, x, t) for i in (1, 2, 3)}
    d_value = TimeSignal(t, t**3)
    fields = solve_limit_problem_general(spec, Order(0, 1), prev, d_value, velocity.edges)
    assert kirchhoff_defect(spec, fields, velocity.edges, d_value) < 1e-10
    assert fields[1].is_zero
    assert fields[2].values[0] == pytest.approx(fields[3].values[0])


def test_general_order_rejects_unmatched_gluing_constant(spec, velocity):
    """A gluing constant that does not vanish at t = 0 is refused."""
    x = np.linspace(0.0, 1.0, 21)
    t = np.linspace(0.0, 1.0, 21)
    prev = {i: EdgeField.zeros(i, FIRST_INTERACTION, x, t) for i in (1, 2, 3)}
    with pytest.raises(MatchingViolated):
        solve_limit_problem_general(spec, Order(1, 1), prev, TimeSignal(t, 1.0 + t), velocity.edges)


def test_boundary_data_zeros(spec):
    """Zero data report themselves as zero and carry zero averaged interactions."""
    data = BoundaryData.zeros(spec.h)
    assert data.is_zero
    assert data.phi_hat[2].is_zero
