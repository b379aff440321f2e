"""Tests for the boundary-layer terms at the outflow bases."""

import numpy as np
import pytest

from junctionflow.boundary_layer import (
    build_layer_term,
    eval_layer,
    layer_decay_bound,
    layer_ode_residual,
)
from junctionflow.edge_transport import TimeSignal
from junctionflow.errors import NonpositiveOutflowSpeed
from junctionflow.orders import BASE_INTEGER, Order


@pytest.fixture
def datum():
    """A polynomial base datum vanishing with three derivatives at t = 0."""
    t = np.linspace(0.0, 1.0, 51)
    return TimeSignal(t, t**4)


def test_base_term_is_pure_exponential(datum):
    """Without a predecessor the term is datum * exp(-v eta)."""
    term = build_layer_term(BASE_INTEGER, None, datum, 2.0)
    assert term.degree == 0
    eta = np.array([0.0, 1.0])
    t = np.array([0.6, 0.6])
    expected = datum(t) * np.exp(-2.0 * eta)
    assert term(eta, t) == pytest.approx(expected, rel=1e-10)
    assert layer_ode_residual(term, None) <= 1e-12


def test_recurrence_solves_the_layer_equation(datum):
    """Each new term raises the degree by one and solves its ODE to round-off."""
    first = build_layer_term(BASE_INTEGER, None, datum, 1.5)
    second = build_layer_term(Order(0, 1), first, datum, 1.5)
    third = build_layer_term(Order(0, 2), second, datum, 1.5)
    assert second.degree == 1
    assert third.degree == 2
    assert layer_ode_residual(second, first) <= 1e-12
    assert layer_ode_residual(third, second) <= 1e-12


def test_layer_meets_base_datum(datum):
    """At eta = 0 the term equals the base datum."""
    first = build_layer_term(BASE_INTEGER, None, datum, 1.0)
    second = build_layer_term(Order(0, 1), first, datum, 1.0)
    t = datum.t
    assert second(np.zeros_like(t), t) == pytest.approx(datum.values, abs=1e-14)


def _quartic(t, dt=0):
    return np.polyval(np.polyder([1.0, 0.0, 0.0, 0.0, 0.0], dt), t)


def test_repair_meets_datum_between_grid_times(datum):
    """With a repair function the term equals the exact datum at eta = 0 for any t."""
    first = build_layer_term(BASE_INTEGER, None, datum, 1.0, repair=_quartic)
    second = build_layer_term(Order(0, 1), first, datum, 1.0, repair=_quartic)
    ts = np.linspace(0.0, 1.0, 137)
    assert second(np.zeros_like(ts), ts) == pytest.approx(ts**4, abs=1e-15)
    assert second.coefficients_at(ts)[1] == pytest.approx(-4.0 * ts**3, abs=1e-8)
    assert layer_ode_residual(second, first) <= 1e-12


def test_layer_vanishes_at_start(datum):
    """Coefficients vanish at t = 0."""
    first = build_layer_term(BASE_INTEGER, None, datum, 1.0)
    second = build_layer_term(Order(0, 1), first, datum, 1.0)
    assert not np.any(second.coeffs[:, 0])


def test_layer_decays(datum):
    """The weighted sup with half the decay rate stays bounded."""
    first = build_layer_term(BASE_INTEGER, None, datum, 2.0)
    second = build_layer_term(Order(0, 1), first, datum, 2.0)
    assert second.decay_margin == pytest.approx(1.0)
    bound = layer_decay_bound(second)
    assert np.isfinite(bound)
    assert bound >= datum.max_abs() - 1e-14


def test_nonpositive_outflow_speed(datum):
    """Layers exist only at outflow bases."""
    with pytest.raises(NonpositiveOutflowSpeed):
        build_layer_term(BASE_INTEGER, None, datum, -1.0)
    with pytest.raises(NonpositiveOutflowSpeed):
        build_layer_term(BASE_INTEGER, None, datum, 0.0)


def test_eval_layer_cutoff(spec, datum):
    """The layer is cut off away from the base and equals Pi at the base."""
    term = build_layer_term(BASE_INTEGER, None, datum, 1.0, edge=2)
    t = np.full(3, 0.8)
    x = np.array([0.5, 0.95, 1.0])
    values = eval_layer(term, spec, x, t, spec.eps, delta=0.1)
    assert values[0] == 0.0
    assert values[2] == pytest.approx(float(datum(np.array([0.8]))[0]))
    eta = (1.0 - 0.95) / spec.eps
    assert values[1] == pytest.approx(float(datum(np.array([0.8]))[0]) * np.exp(-eta))


def test_eta_derivative(datum):
    """d/d eta of the term matches a central difference."""
    first = build_layer_term(BASE_INTEGER, None, datum, 1.0)
    second = build_layer_term(Order(0, 1), first, datum, 1.0)
    eta = np.array([0.7])
    t = np.array([0.5])
    h = 1e-5
    numeric = (second(eta + h, t) - second(eta - h, t)) / (2 * h)
    assert second(eta, t, d_eta=1) == pytest.approx(numeric, rel=1e-6)
