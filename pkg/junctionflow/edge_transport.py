"""First-order transport problems on the edges of the limit graph.

Every regular coefficient w solves dw/dt + (v w)' = rhs on its edge with one
boundary value on the inflow end. With q = v w the equation becomes
dq/dt + v dq/dx = v rhs, so q is carried along characteristics and the
solution is evaluated explicitly by quadrature along each of them.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline, PchipInterpolator, RectBivariateSpline, make_interp_spline

from junctionflow.errors import MatchingViolated, WrongSign
from junctionflow.expressions import Expression
from junctionflow.geometry import EDGES, NetworkSpec, edge_solve_order, limit_graph
from junctionflow.orders import BASE_FRACTIONAL, BASE_INTEGER, Order
from junctionflow.velocity import EdgeVelocity

SpaceTimeFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]
TimeFunction = Callable[[np.ndarray], np.ndarray]

_CHUNK = 16384


class TimeSignal:
    """Samples of a function of t on a uniform grid with a quintic interpolant.

    A clamped signal vanishes with its first derivative at the first sample and
    is reconstructed by a cubic spline with that end condition.
    """

    def __init__(self, t: np.ndarray, values: np.ndarray, clamped: bool = False):
        self.t = np.asarray(t, dtype=float)
        self.values = np.array(values, dtype=float)
        self.clamped = clamped
        if clamped:
            self.values[0] = 0.0
            self._spline = CubicSpline(self.t, self.values, bc_type=((1, 0.0), (2, 0.0)))
            return
        degree = min(5, len(self.t) - 1)
        if degree % 2 == 0:
            degree -= 1
        self._spline = make_interp_spline(self.t, self.values, k=max(degree, 1))

    @classmethod
    def from_expression(cls, t: np.ndarray, expr: Expression) -> "TimeSignal":
        return cls(t, expr(t=t))

    @classmethod
    def zeros(cls, t: np.ndarray) -> "TimeSignal":
        return cls(t, np.zeros(len(t)))

    def __call__(self, t: np.ndarray, derivative: int = 0) -> np.ndarray:
        t = np.clip(np.asarray(t, dtype=float), self.t[0], self.t[-1])
        return np.asarray(self._spline(t, nu=derivative), dtype=float)

    def derivative(self, n: int = 1) -> "TimeSignal":
        return TimeSignal(self.t, self(self.t, derivative=n))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


class EdgeField:
    """A space-time grid function w(x, t) on one edge, reconstructed by a quintic spline."""

    def __init__(
        self,
        edge: int,
        order: Order,
        x: np.ndarray,
        t: np.ndarray,
        values: np.ndarray,
        spot_check_defect: float = 0.0,
        lift: Optional[Expression] = None,
    ):
        self.edge = edge
        self.order = order
        self.x = np.asarray(x, dtype=float)
        self.t = np.asarray(t, dtype=float)
        self.values = np.asarray(values, dtype=float)
        # a datum in t alone, carried exactly; the spline holds values - lift
        self.lift = None if lift is None or lift.is_zero else lift
        self.spot_check_defect = spot_check_defect
        self.derivative_order_available = min(4, len(self.x) - 2, len(self.t) - 2)
        self._spline: Optional[RectBivariateSpline] = None

    @classmethod
    def zeros(cls, edge: int, order: Order, x: np.ndarray, t: np.ndarray) -> "EdgeField":
        return cls(edge, order, x, t, np.zeros((len(x), len(t))))

    @property
    def spline(self) -> RectBivariateSpline:
        if self._spline is None:
            kx = min(5, len(self.x) - 1)
            kt = min(5, len(self.t) - 1)
            values = self.values
            if self.lift is not None:
                values = values - self._lift_at(self.t)[None, :]
            self._spline = RectBivariateSpline(self.x, self.t, values, kx=kx, ky=kt, s=0)
        return self._spline

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def __call__(self, x: np.ndarray, t: np.ndarray, dx: int = 0, dt: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        shape = np.broadcast(x, t).shape
        if self.is_zero:
            return np.zeros(shape)
        xb, tb = np.broadcast_arrays(
            np.clip(x, self.x[0], self.x[-1]), np.clip(t, self.t[0], self.t[-1])
        )
        out = self.spline.ev(xb.ravel(), tb.ravel(), dx=dx, dy=dt).reshape(shape)
        if self.lift is not None and dx == 0:
            out = out + self._lift_at(tb, dt)
        return out

    def _lift_at(self, t: np.ndarray, dt: int = 0) -> np.ndarray:
        assert self.lift is not None
        lift = self.lift.diff("t", dt) if dt else self.lift
        return np.broadcast_to(np.asarray(lift(t=t), dtype=float), np.shape(t))

    def trace(self, x0: float, dx: int = 0) -> TimeSignal:
        """Time signal of the field (or an x-derivative) at a fixed position."""
        if dx == 0 and np.isclose(x0, self.x[0]):
            return TimeSignal(self.t, self.values[0])
        if dx == 0 and np.isclose(x0, self.x[-1]):
            return TimeSignal(self.t, self.values[-1])
        return TimeSignal(self.t, self(np.full(len(self.t), x0), self.t, dx=dx))

    def to_frame(self, stride: int = 1) -> pd.DataFrame:
        xs = self.x[::stride]
        ts = self.t[::stride]
        xx, tt = np.meshgrid(xs, ts, indexing="ij")
        return pd.DataFrame(
            {"x": xx.ravel(), "t": tt.ravel(), "w": self.values[::stride, ::stride].ravel()}
        )


@dataclass
class BoundaryData:
    """Dirichlet data at the bases and lateral and node interactions."""

    q: Tuple[Expression, Expression, Expression]
    phi: Tuple[Expression, Expression, Expression]
    phi0: Expression
    radii: Tuple[float, float, float]
    phi_hat: Dict[int, "AveragedInteraction"] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for i in EDGES:
            if i not in self.phi_hat:
                self.phi_hat[i] = average_lateral_interaction(self.phi[i - 1], self.radii[i - 1])

    @classmethod
    def zeros(cls, radii: Sequence[float]) -> "BoundaryData":
        q = tuple(Expression("0", ("t",)) for _ in EDGES)
        phi = tuple(Expression("0", ("theta", "x", "t")) for _ in EDGES)
        return cls(q, phi, Expression("0", ("xi1", "xi2", "xi3", "t")), tuple(radii))  # type: ignore[arg-type]

    @property
    def is_zero(self) -> bool:
        return all(e.is_zero for e in self.q + self.phi) and self.phi0.is_zero


class AveragedInteraction:
    """Circle integral of a lateral interaction divided by the disk area."""

    def __init__(self, phi: Expression, radius: float, n_nodes: int = 256):
        self.phi = phi
        self.radius = radius
        self.theta = 2.0 * np.pi * np.arange(n_nodes) / n_nodes

    @property
    def is_zero(self) -> bool:
        return self.phi.is_zero

    def __call__(self, x: np.ndarray, t: np.ndarray, dt: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        shape = np.broadcast(x, t).shape
        if self.is_zero:
            return np.zeros(shape)
        phi = self.phi.diff("t", dt) if dt else self.phi
        values = phi(theta=self.theta.reshape((-1,) + (1,) * len(shape)), x=x, t=t)
        # trapezoid rule on the periodic circle
        return (2.0 / self.radius) * values.mean(axis=0)

    def tabulate(self, edge: int, x: np.ndarray, t: np.ndarray) -> "EdgeField":
        """Sample on a space-time grid and reconstruct with the edge-field spline."""
        xx, tt = np.meshgrid(x, t, indexing="ij")
        values = np.zeros(xx.shape)
        for row in range(len(x)):
            values[row] = self(xx[row], tt[row])
        return EdgeField(edge, BASE_FRACTIONAL, x, t, values)


def average_lateral_interaction(phi: Expression, radius: float, n_nodes: int = 256) -> AveragedInteraction:
    """Line integral of phi over the circle of radius h divided by pi h^2."""
    return AveragedInteraction(phi, radius, max(n_nodes, 256))


class _Characteristics:
    """Travel-time parameterization of the characteristics of one edge."""

    def __init__(self, velocity: EdgeVelocity, length: float, n_fine: int):
        xf = np.linspace(0.0, length, n_fine)
        vf = velocity.axial(xf)
        if np.all(vf > 0):
            self.inflow_x = 0.0
        elif np.all(vf < 0):
            self.inflow_x = length
        else:
            raise WrongSign(f"velocity of edge {velocity.edge} changes sign or vanishes")
        self.velocity = velocity
        self.sign = 1.0 if self.inflow_x == 0.0 else -1.0
        slowness = CubicSpline(xf, 1.0 / np.abs(vf)).antiderivative()
        tau = slowness(xf) - slowness(self.inflow_x)
        tau *= self.sign
        self._tau = CubicSpline(xf, tau)
        order = np.argsort(tau)
        self._inverse = PchipInterpolator(tau[order], xf[order])
        self.tau_max = float(tau.max())

    def tau(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(self._tau(x), 0.0)

    def position(self, tau: np.ndarray) -> np.ndarray:
        return self._inverse(np.clip(tau, 0.0, self.tau_max))


def _characteristic_values(
    chars: _Characteristics,
    x: np.ndarray,
    t: np.ndarray,
    rhs: Optional[SpaceTimeFunction],
    inflow: TimeFunction,
    nodes: np.ndarray,
    weights: np.ndarray,
) -> np.ndarray:
    v = chars.velocity
    tau_x = chars.tau(x)
    from_inflow = t >= tau_x
    start = np.where(from_inflow, t - tau_x, 0.0)
    v_in = float(v.axial(np.array([chars.inflow_x]))[0])
    q = np.where(from_inflow, v_in * inflow(start), 0.0)
    if rhs is not None:
        span = t - start
        sigma = start[:, None] + 0.5 * span[:, None] * (1.0 + nodes[None, :])
        pos = chars.position(tau_x[:, None] - (t[:, None] - sigma))
        integrand = v.axial(pos) * rhs(pos, sigma)
        q = q + 0.5 * span * (integrand @ weights)
    return q / v.axial(x)


def _check_corner(edge: int, rhs: Optional[SpaceTimeFunction], inflow: TimeFunction, x: np.ndarray, tol: float) -> None:
    g0 = float(np.abs(inflow(np.array([0.0]))).max())
    r0 = 0.0 if rhs is None else float(np.abs(rhs(x, np.zeros_like(x))).max())
    if g0 > tol or r0 > tol:
        raise MatchingViolated(
            f"edge {edge}: data do not vanish at t = 0 (inflow {g0:.2e}, source {r0:.2e})"
        )


def solve_edge_hyperbolic(
    edge: int,
    velocity: EdgeVelocity,
    rhs: Optional[SpaceTimeFunction],
    inflow_bc: TimeFunction,
    x: np.ndarray,
    t: np.ndarray,
    order: Order = BASE_INTEGER,
    bc_end: Optional[str] = None,
    n_quad: int = 16,
    n_checks: int = 10,
    seed: int = 0,
    matching_tol: float = 1e-8,
    lift: Optional[Expression] = None,
) -> EdgeField:
    """Solve dw/dt + (v w)' = rhs with zero initial value and inflow datum inflow_bc.

    When the inflow datum is an expression, pass it as lift so that the trace at
    the inflow end reproduces it exactly between grid times.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    chars = _Characteristics(velocity, float(x[-1]), 8 * (len(x) - 1) + 1)
    expected_end = "start" if chars.inflow_x == 0.0 else "end"
    if bc_end is not None and bc_end != expected_end:
        raise WrongSign(f"edge {edge}: datum on the {bc_end} but the flow enters at the {expected_end}")
    _check_corner(edge, rhs, inflow_bc, x, matching_tol)

    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    xx, tt = np.meshgrid(x, t, indexing="ij")
    values = np.zeros(xx.shape)
    if rhs is not None or np.any(inflow_bc(t)):
        xs, ts = xx.ravel(), tt.ravel()
        flat = np.empty(len(xs))
        for lo in range(0, len(xs), _CHUNK):
            part = slice(lo, lo + _CHUNK)
            flat[part] = _characteristic_values(chars, xs[part], ts[part], rhs, inflow_bc, nodes, weights)
        values = flat.reshape(xx.shape)
    values[:, 0] = 0.0

    defect = 0.0
    if n_checks and np.any(values):
        defect = _spot_check(chars, x, t, rhs, inflow_bc, nodes, weights, n_checks, seed)
    return EdgeField(edge, order, x, t, values, spot_check_defect=defect, lift=lift)


def _spot_check(
    chars: _Characteristics,
    x: np.ndarray,
    t: np.ndarray,
    rhs: Optional[SpaceTimeFunction],
    inflow: TimeFunction,
    nodes: np.ndarray,
    weights: np.ndarray,
    n_checks: int,
    seed: int,
) -> float:
    """Integrate the characteristic ODE independently and compare with the explicit formula."""
    rng = np.random.default_rng(seed)
    v = chars.velocity
    worst = 0.0
    scale = 1e-300
    for _ in range(n_checks):
        x0 = float(rng.uniform(x[0], x[-1]))
        t0 = float(rng.uniform(t[1], t[-1]))
        tau0 = float(chars.tau(np.array([x0]))[0])
        if t0 >= tau0:
            s0, pos0 = t0 - tau0, chars.inflow_x
            w0 = float(inflow(np.array([s0]))[0])
        else:
            s0, pos0 = 0.0, float(chars.position(np.array([tau0 - t0]))[0])
            w0 = 0.0
        if t0 - s0 < 1e-12:
            continue

        def ode(s: float, y: np.ndarray) -> np.ndarray:
            pos = np.array([y[0]])
            source = 0.0 if rhs is None else float(rhs(pos, np.array([s]))[0])
            return np.array(
                [float(v.axial(pos)[0]), -float(v.axial_derivative(pos)[0]) * y[1] + source]
            )

        sol = solve_ivp(ode, (s0, t0), [pos0, w0], method="DOP853", rtol=1e-11, atol=1e-13)
        x_end, w_end = sol.y[0, -1], sol.y[1, -1]
        if not x[0] <= x_end <= x[-1]:
            continue
        explicit = _characteristic_values(chars, np.array([x_end]), np.array([t0]), rhs, inflow, nodes, weights)[0]
        worst = max(worst, abs(explicit - w_end))
        scale = max(scale, abs(w_end))
    return worst / max(scale, 1.0)


def _vertex_signal(field: EdgeField) -> TimeSignal:
    return TimeSignal(field.t, field.values[0])


def _edge_order(spec: NetworkSpec, velocities: Sequence[EdgeVelocity]) -> Sequence[int]:
    return edge_solve_order(limit_graph(spec, [v.const_near_node for v in velocities]))


def solve_limit_problem_negative_orders(
    spec: NetworkSpec,
    data: BoundaryData,
    velocities: Sequence[EdgeVelocity],
    x_grids: Dict[int, np.ndarray],
    t: np.ndarray,
    n_quad: int = 16,
    seed: int = 0,
) -> Tuple[Dict[int, EdgeField], Dict[int, EdgeField]]:
    """Base orders alpha-1 (driven by the lateral interactions) and 0 (driven by q_1).

    The inflow edge is solved first; its vertex value is the inflow datum of the
    outflow edges, so continuity and the homogeneous Kirchhoff condition hold.
    """
    order_edges = _edge_order(spec, velocities)
    results = []
    for order in (BASE_FRACTIONAL, BASE_INTEGER):
        fields: Dict[int, EdgeField] = {}
        vertex: Optional[TimeSignal] = None
        for i in order_edges:
            vel = velocities[i - 1]
            rhs: Optional[SpaceTimeFunction] = None
            if order == BASE_FRACTIONAL and not data.phi_hat[i].is_zero:
                table = data.phi_hat[i].tabulate(i, x_grids[i], t)
                rhs = lambda xs, ts, f=table: -f(xs, ts)  # noqa: E731
            lift: Optional[Expression] = None
            if vel.const_near_node < 0:
                if order == BASE_INTEGER:
                    lift = data.q[i - 1]
                    inflow: TimeFunction = lambda ts, e=lift: e(t=ts)  # noqa: E731
                else:
                    inflow = np.zeros_like
            else:
                assert vertex is not None
                inflow = vertex
            fields[i] = solve_edge_hyperbolic(
                i, vel, rhs, inflow, x_grids[i], t, order=order, n_quad=n_quad, seed=seed + i, lift=lift
            )
            if vel.const_near_node < 0:
                vertex = _vertex_signal(fields[i])
        results.append(fields)
    return results[0], results[1]


def solve_limit_problem_general(
    spec: NetworkSpec,
    order: Order,
    prev: Dict[int, EdgeField],
    d_value: TimeSignal,
    velocities: Sequence[EdgeVelocity],
    n_quad: int = 16,
    seed: int = 0,
    matching_tol: float = 1e-8,
) -> Dict[int, EdgeField]:
    """Higher order on the graph: source w_prev'', Kirchhoff datum d, weighted vertex split."""
    scale = max(1.0, d_value.max_abs())
    if abs(float(d_value(np.array([0.0]))[0])) > matching_tol * scale or abs(
        float(d_value(np.array([0.0]), derivative=1)[0])
    ) > 1e-4 * scale:
        raise MatchingViolated(f"gluing constant of order {order.label()} does not vanish to first order at t = 0")
    h = np.asarray(spec.h, dtype=float)
    v = np.array([vel.const_near_node for vel in velocities])
    fields: Dict[int, EdgeField] = {}
    inflow_value: Optional[TimeSignal] = None
    for i in _edge_order(spec, velocities):
        base = prev[i]
        rhs: Optional[SpaceTimeFunction] = None
        if not base.is_zero:
            rhs = lambda xs, ts, f=base: f(xs, ts, dx=2)  # noqa: E731
        vel = velocities[i - 1]
        if vel.const_near_node < 0:
            inflow: TimeFunction = np.zeros_like
        else:
            assert inflow_value is not None
            split = (d_value.values - v[0] * h[0] ** 2 * inflow_value.values) / (2.0 * v[i - 1] * h[i - 1] ** 2)
            inflow = TimeSignal(d_value.t, split, clamped=d_value.clamped)
        fields[i] = solve_edge_hyperbolic(
            i, vel, rhs, inflow, base.x, base.t, order=order, n_quad=n_quad, seed=seed + i,
            matching_tol=matching_tol * max(1.0, float(np.abs(base.values).max())),
        )
        if vel.const_near_node < 0:
            inflow_value = _vertex_signal(fields[i])
    return fields


def kirchhoff_defect(
    spec: NetworkSpec,
    fields: Dict[int, EdgeField],
    velocities: Sequence[EdgeVelocity],
    d_value: Optional[TimeSignal] = None,
) -> float:
    """max over t of |sum v_i h_i^2 w_i(0, t) - d(t)|."""
    total = sum(
        velocities[i - 1].const_near_node * spec.radius(i) ** 2 * fields[i].values[0] for i in EDGES
    )
    if d_value is not None:
        total = total - d_value.values
    return float(np.max(np.abs(total)))


def continuity_defect(fields: Dict[int, EdgeField]) -> float:
    w1 = fields[1].values[0]
    return float(max(np.max(np.abs(fields[i].values[0] - w1)) for i in (2, 3)))
