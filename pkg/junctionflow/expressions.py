"""Small arithmetic-expression grammar for data functions and velocities."""

from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import sympy as sp
from sympy.core.function import AppliedUndef
from sympy.parsing.sympy_parser import parse_expr, standard_transformations

from junctionflow.errors import ExpressionError

VARIABLE_NAMES = ("x", "t", "y1", "y2", "theta", "xi1", "xi2", "xi3")
SYMBOLS: Dict[str, sp.Symbol] = {name: sp.Symbol(name, real=True) for name in VARIABLE_NAMES}


def _bump_ratio(z: sp.Expr) -> sp.Expr:
    f_left = sp.exp(-1 / z)
    f_right = sp.exp(-1 / (1 - z))
    return f_left / (f_left + f_right)


def smooth_step(s: Any, a: Any, b: Any) -> sp.Expr:
    """C-infinity step: 0 for s <= a, 1 for s >= b, monotone in between."""
    z = (sp.sympify(s) - a) / (sp.sympify(b) - a)
    return sp.Piecewise((0, z <= 0), (1, z >= 1), (_bump_ratio(z), True))


def plateau(s: Any, a: Any, b: Any, c: Any, d: Any) -> sp.Expr:
    """Smooth plateau equal to 1 on [b, c] and 0 outside (a, d)."""
    return smooth_step(s, a, b) * (1 - smooth_step(s, c, d))


_FUNCTIONS: Dict[str, Any] = {
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "tanh": sp.tanh,
    "abs": sp.Abs,
    "pi": sp.pi,
    "step": smooth_step,
    "plateau": plateau,
}

_GLOBALS: Dict[str, Any] = {
    "Integer": sp.Integer,
    "Float": sp.Float,
    "Rational": sp.Rational,
    "Symbol": sp.Symbol,
    "__builtins__": {},
}


def parse_expression(text: str, variables: Sequence[str]) -> sp.Expr:
    """Parse an expression string, allowing only the named variables."""
    local_dict: Dict[str, Any] = dict(_FUNCTIONS)
    local_dict.update({name: SYMBOLS[name] for name in variables})
    try:
        expr = parse_expr(
            str(text),
            local_dict=local_dict,
            global_dict=dict(_GLOBALS),
            transformations=standard_transformations,
        )
        expr = sp.sympify(expr)
    except Exception as e:
        raise ExpressionError(f"Cannot parse expression '{text}': {e}") from e

    allowed = {SYMBOLS[name] for name in variables}
    unknown = expr.free_symbols - allowed
    unknown |= {f.func for f in expr.atoms(AppliedUndef)}
    if unknown:
        names = ", ".join(sorted(str(s) for s in unknown))
        raise ExpressionError(
            f"Unknown name(s) {names} in '{text}'; allowed variables: {', '.join(variables)}"
        )
    return expr


class Expression:
    """A parsed expression with analytic derivatives and numpy evaluation."""

    def __init__(self, text: str, variables: Sequence[str], sym: Optional[sp.Expr] = None):
        self.text = str(text)
        self.variables: Tuple[str, ...] = tuple(variables)
        self.sym = parse_expression(text, variables) if sym is None else sym
        self._func: Optional[Callable[..., Any]] = None

    @classmethod
    def constant(cls, value: float, variables: Sequence[str]) -> "Expression":
        """Expression that ignores its variables."""
        return cls(repr(float(value)), variables, sp.Float(value))

    def __repr__(self) -> str:
        return f"Expression({self.text!r}, {self.variables})"

    @property
    def is_zero(self) -> bool:
        return bool(self.sym == 0 or self.sym.is_zero is True)

    def depends_on(self, name: str) -> bool:
        return SYMBOLS[name] in self.sym.free_symbols

    def diff(self, name: str, n: int = 1) -> "Expression":
        """Analytic derivative of order n with respect to one variable."""
        if n == 0:
            return self
        if name not in self.variables:
            return Expression("0", self.variables, sp.Integer(0))
        sym = sp.diff(self.sym, SYMBOLS[name], n)
        return Expression(f"d^{n}/d{name}^{n}({self.text})", self.variables, sym)

    def substitute(self, **values: float) -> "Expression":
        """Fix some variables to numbers."""
        sym = self.sym.subs({SYMBOLS[k]: v for k, v in values.items()})
        rest = tuple(v for v in self.variables if v not in values)
        return Expression(self.text, rest, sym)

    def __call__(self, **values: Any) -> np.ndarray:
        """Evaluate with broadcasting; variables the expression ignores may be omitted."""
        if self._func is None:
            self._func = sp.lambdify(
                [SYMBOLS[v] for v in self.variables], self.sym, modules="numpy"
            )
        args = []
        for name in self.variables:
            if name in values:
                args.append(np.asarray(values[name], dtype=float))
            elif self.depends_on(name):
                raise ExpressionError(f"Missing value for '{name}' in {self.text!r}")
            else:
                args.append(np.zeros(()))
        shape = np.broadcast(*args).shape if args else ()
        with np.errstate(all="ignore"):
            out = self._func(*args)
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()
