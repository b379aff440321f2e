"""Tests for the expression grammar."""

import numpy as np
import pytest

from junctionflow.errors import ExpressionError
from junctionflow.expressions import Expression


def test_evaluate_broadcasts():
    """Expressions evaluate elementwise with numpy broadcasting."""
    expr = Expression("x**2 + sin(pi*t)", ("x", "t"))
    x = np.array([0.0, 1.0, 2.0])[:, None]
    t = np.array([0.0, 0.5])[None, :]
    values = expr(x=x, t=t)
    assert values.shape == (3, 2)
    assert values[2, 1] == pytest.approx(5.0)


def test_unknown_name_rejected():
    """Names outside the allowed variables raise ExpressionError."""
    with pytest.raises(ExpressionError):
        Expression("x + y1", ("x",))
    with pytest.raises(ExpressionError):
        Expression("foo(t)", ("t",))


def test_syntax_error_rejected():
    """Malformed text raises ExpressionError."""
    with pytest.raises(ExpressionError):
        Expression("2 * (t", ("t",))


def test_analytic_derivative():
    """diff gives exact derivatives of any order."""
    expr = Expression("exp(2*t)", ("t",))
    assert expr.diff("t", 3)(t=0.0) == pytest.approx(8.0)
    assert expr.diff("t", 0) is expr
    assert expr.diff("x").is_zero


def test_step_and_plateau():
    """step is 0 below a and 1 above b; plateau is 1 on its flat part."""
    step = Expression("step(t, 0, 0.5)", ("t",))
    assert step(t=-0.1) == 0.0
    assert step(t=0.0) == 0.0
    assert step(t=0.7) == 1.0
    assert 0.0 < float(step(t=0.25)) < 1.0
    bump = Expression("plateau(x, 0.3, 0.4, 0.6, 0.7)", ("x",))
    assert bump(x=0.5) == 1.0
    assert bump(x=0.2) == 0.0
    assert bump(x=0.8) == 0.0


def test_step_is_flat_at_start():
    """All derivatives of the smooth step vanish at its left end."""
    step = Expression("step(t, 0, 0.5)", ("t",))
    for n in range(1, 4):
        assert abs(float(step.diff("t", n)(t=0.0))) < 1e-12


def test_missing_variable():
    """A variable the expression depends on must be supplied; ignored ones may be omitted."""
    expr = Expression("x*t", ("x", "t"))
    with pytest.raises(ExpressionError):
        expr(x=1.0)
    assert Expression("2*t", ("x", "t"))(t=1.5) == pytest.approx(3.0)


def test_substitute_and_constant():
    """substitute fixes variables; constant ignores them."""
    expr = Expression("x + 10*t", ("x", "t")).substitute(t=0.5)
    assert expr.variables == ("x",)
    assert expr(x=1.0) == pytest.approx(6.0)
    c = Expression.constant(2.5, ("t",))
    assert np.allclose(c(t=np.zeros(4)), 2.5)
    assert Expression("0", ("t",)).is_zero
