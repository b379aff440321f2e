"""Assembly and evaluation of the partial sums of the asymptotic expansion."""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd

from junctionflow.boundary_layer import LayerTerm, RepairFunction, build_layer_term, eval_layer
from junctionflow.cell_corrector import DiskField, DiskGrid, build_corrector
from junctionflow.config import Numerics
from junctionflow.edge_transport import (
    BoundaryData,
    EdgeField,
    TimeSignal,
    solve_limit_problem_general,
    solve_limit_problem_negative_orders,
)
from junctionflow.errors import InsufficientMatching, OutOfDomain
from junctionflow.expressions import Expression
from junctionflow.geometry import (
    EDGES,
    NODE_REGION,
    NetworkSpec,
    build_rescaled_node,
    cutoff_chi_ell0,
    transverse_axes,
)
from junctionflow.node_layer import (
    GluingConstant,
    NodeField,
    NodeLayerOperator,
    NodeProblem,
    compute_gluing_constant,
    sample_indices,
    solve_node_problem,
)
from junctionflow.orders import (
    BASE_FRACTIONAL,
    BASE_INTEGER,
    FIRST_INTERACTION,
    Order,
    fractional_orders,
    integer_orders,
    partial_sum_orders,
    principal_part,
)
from junctionflow.utils import console, make_progress
from junctionflow.velocity import VelocityField, solve_node_potential

ZONES = ("node_region", "blend", "cyl_far", "base_layer")


@dataclass
class ExpansionOrderSet:
    """All coefficients of the order-M partial sum; they do not depend on eps."""

    spec: NetworkSpec
    M: int
    delta: float
    velocity: VelocityField
    data: BoundaryData
    w: Dict[Order, Dict[int, EdgeField]] = field(default_factory=dict)
    u: Dict[Order, Dict[int, DiskField]] = field(default_factory=dict)
    node: Dict[Order, NodeField] = field(default_factory=dict)
    layers: Dict[Order, Dict[int, LayerTerm]] = field(default_factory=dict)
    gluing: Dict[Order, GluingConstant] = field(default_factory=dict)
    audit: nx.DiGraph = field(default_factory=nx.DiGraph)
    operator: Optional[NodeLayerOperator] = None

    @property
    def alpha(self) -> float:
        return self.spec.alpha

    @property
    def orders(self) -> List[Order]:
        return partial_sum_orders(self.alpha, self.M)

    @property
    def exponents(self) -> List[float]:
        return [o.exponent(self.alpha) for o in self.orders]

    @property
    def principal_part(self) -> List[Order]:
        return [o for o in principal_part(self.alpha) if o in self.orders]

    @property
    def t(self) -> np.ndarray:
        return self.w[BASE_INTEGER][1].t if BASE_INTEGER in self.w else self.w[BASE_FRACTIONAL][1].t

    def with_eps(self, eps: float) -> "ExpansionOrderSet":
        """Same coefficients, evaluated on the junction of thickness eps."""
        spec = self.spec.with_eps(eps)
        return replace(self, spec=spec, velocity=replace(self.velocity, spec=spec))

    def inventory(self) -> List[str]:
        """Names of the nonzero-capable terms, e.g. 'w[alpha-1]'."""
        names = []
        for order in self.orders:
            names.append(f"w[{order.label()}]")
            if order.chain_position > 0:
                names.append(f"u[{order.label()}]")
            names.append(f"N[{order.label()}]")
            names.append(f"Pi[{order.label()}]")
        return names


def check_matching(data: BoundaryData, spec: NetworkSpec, n_derivatives: int, tol: float = 1e-9) -> None:
    """Raise InsufficientMatching unless the data and their t-derivatives up to n vanish at t = 0."""
    xs = np.linspace(0.0, max(spec.ell), 41)
    theta = np.linspace(0.0, 2 * np.pi, 8, endpoint=False)
    face = np.linspace(-spec.ell0, spec.ell0, 9)

    def check(expr: Expression, name: str, **values: np.ndarray) -> None:
        for n in range(n_derivatives + 1):
            value = np.abs(expr.diff("t", n)(t=0.0, **values))
            if np.any(value > tol):
                raise InsufficientMatching(
                    f"d^{n}/dt^{n} {name} does not vanish at t = 0 (max {float(value.max()):.2e})"
                )

    for i in EDGES:
        check(data.q[i - 1], f"q{i}")
        check(data.phi[i - 1], f"phi{i}", theta=theta[:, None], x=xs[None, :])
    g = np.stack(np.meshgrid(face, face, face, indexing="ij"), axis=-1).reshape(-1, 3)
    check(data.phi0, "phi0", xi1=g[:, 0], xi2=g[:, 1], xi3=g[:, 2])


def base_repair(w: EdgeField, length: float, q: Optional[Expression]) -> RepairFunction:
    """Datum q(t) - w(ell, t) of the base layer, through the same spline the partial sum evaluates."""

    def repair(t: np.ndarray, dt: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        value = -w(np.full(t.shape, length), t, dt=dt)
        if q is not None and not q.is_zero:
            datum = q.diff("t", dt) if dt else q
            value = value + np.broadcast_to(np.asarray(datum(t=t), dtype=float), t.shape)
        return value

    return repair


def _label(kind: str, order: Order, edge: Optional[int] = None) -> str:
    suffix = "" if edge is None else f"^{edge}"
    return f"{kind}[{order.label()}]{suffix}"


def _psi_signals(order: Order, w: Dict[Order, Dict[int, EdgeField]]) -> Dict[int, List[TimeSignal]]:
    """Taylor coefficients d^j/dx^j w_{e-j}(0, t), j = 1..chain position, per edge."""
    psi: Dict[int, List[TimeSignal]] = {}
    for i in EDGES:
        coefficients = []
        prev: Optional[Order] = order
        for j in range(1, order.chain_position + 1):
            prev = prev.previous if prev is not None else None
            if prev is None or prev not in w:
                break
            coefficients.append(w[prev][i].trace(0.0, dx=j))
        psi[i] = coefficients
    return psi


def build_expansion(
    spec: NetworkSpec,
    data: BoundaryData,
    velocity: VelocityField,
    M: int,
    numerics: Optional[Numerics] = None,
    seed: int = 0,
    threads: int = 1,
    verbose: bool = False,
) -> ExpansionOrderSet:
    """Solve the recurrence chain by chain: gluing constant, w, u, N, then Pi."""
    numerics = numerics or Numerics()
    if M < 1:
        raise ValueError("M must be at least 1")
    check_matching(data, spec, M + 1)
    delta = numerics.base_delta(spec)

    t = np.linspace(0.0, spec.T, numerics.edge_nt)
    x_grids = {i: np.linspace(0.0, spec.length(i), int(round(numerics.edge_nx * spec.length(i))) + 1) for i in EDGES}
    speeds = [e.const_near_node for e in velocity.edges]

    node_mesh = build_rescaled_node(spec, numerics.trunc_len, numerics.node_spacing)
    if verbose:
        console.print(f"📐 Node mesh: {node_mesh.n_cells} cells, spacing {node_mesh.spacing:.4f}")
    potential = solve_node_potential(node_mesh, speeds, spec)
    velocity = VelocityField(spec, velocity.edges, potential, node_mesh)
    operator = NodeLayerOperator(
        node_mesh, potential, speeds, solver=numerics.node_solver, tol=numerics.node_tol, threads=threads
    )
    times = t[sample_indices(len(t), numerics.node_samples)]

    result = ExpansionOrderSet(spec, M, delta, velocity, data, operator=operator)
    audit = result.audit
    chains = [fractional_orders(spec.alpha, M), integer_orders(spec.alpha, M)]

    base_w: Dict[Order, Dict[int, EdgeField]] = {}
    if any(chains):
        frac, integer = solve_limit_problem_negative_orders(
            spec, data, velocity.edges, x_grids, t, n_quad=numerics.n_quad, seed=seed
        )
        base_w = {BASE_FRACTIONAL: frac, BASE_INTEGER: integer}

    total = sum(len(c) for c in chains)
    with make_progress(disable=not verbose) as progress:
        task = progress.add_task("🧮 Building coefficients...", total=total)
        for chain in chains:
            for order in chain:
                progress.update(task, description=f"🧮 Order {order.label()}")
                _build_order(result, order, base_w, x_grids, t, times, numerics, seed)
                progress.advance(task)
    if verbose:
        console.print(f"✅ Built {len(result.orders)} orders: {', '.join(o.label() for o in result.orders)}")
    return result


def _build_order(
    result: ExpansionOrderSet,
    order: Order,
    base_w: Dict[Order, Dict[int, EdgeField]],
    x_grids: Dict[int, np.ndarray],
    t: np.ndarray,
    times: np.ndarray,
    numerics: Numerics,
    seed: int,
) -> None:
    spec, data, velocity, audit = result.spec, result.data, result.velocity, result.audit
    operator = result.operator
    assert operator is not None
    prev = order.previous
    prev2 = prev.previous if prev is not None else None
    psi = _psi_signals(order, result.w)
    phi0 = data.phi0 if order == FIRST_INTERACTION and not data.phi0.is_zero else None

    if order.is_base:
        result.w[order] = base_w[order]
        result.gluing[order] = compute_gluing_constant(order, None, t, None, None, {})
        if order == BASE_FRACTIONAL:
            audit.add_edge("phi_hat", _label("w", order))
        else:
            audit.add_edge("q", _label("w", order))
    else:
        assert prev is not None
        gluing = compute_gluing_constant(
            order, operator, t, result.node.get(prev), phi0, psi, numerics.derivative_mode
        )
        result.gluing[order] = gluing
        audit.add_edge(_label("N", prev), _label("d", order))
        audit.add_edge(_label("w", prev), _label("d", order))
        if phi0 is not None:
            audit.add_edge("phi0", _label("d", order))
        result.w[order] = solve_limit_problem_general(
            spec, order, result.w[prev], gluing.signal, velocity.edges, n_quad=numerics.n_quad, seed=seed
        )
        audit.add_edge(_label("d", order), _label("w", order))
        audit.add_edge(_label("w", prev), _label("w", order))

    result.u[order] = {}
    for i in EDGES:
        grid = DiskGrid(spec.radius(i), numerics.disk_nr, numerics.disk_ntheta)
        result.u[order][i] = build_corrector(
            order,
            i,
            grid,
            x_grids[i],
            t,
            velocity.edge(i),
            result.w[prev][i] if prev is not None else None,
            result.u[prev][i] if prev is not None else None,
            result.u[prev2][i] if prev2 is not None else None,
            data.phi[i - 1] if order == FIRST_INTERACTION else None,
        )
    if prev is not None:
        audit.add_edge(_label("w", prev), _label("u", order))
        audit.add_edge(_label("u", prev), _label("u", order))
    if prev2 is not None:
        audit.add_edge(_label("u", prev2), _label("u", order))
    if order == FIRST_INTERACTION:
        audit.add_edge("phi", _label("u", order))

    vertex = {i: result.w[order][i].trace(0.0) for i in EDGES}
    problem = NodeProblem(
        order,
        vertex,
        psi,
        phi0,
        result.node.get(prev) if prev is not None else None,
        derivative_mode=numerics.derivative_mode,
    )
    result.node[order] = solve_node_problem(
        operator,
        problem,
        times,
        solvability_tol=numerics.solvability_tol,
        truncation_tol=numerics.truncation_tol,
        on_truncation=numerics.truncation_check,
    )
    audit.add_edge(_label("w", order), _label("N", order))
    if prev is not None:
        audit.add_edge(_label("N", prev), _label("N", order))

    result.layers[order] = {}
    for i in EDGES:
        v_end = float(velocity.edge(i).axial(np.array([spec.length(i)]))[0])
        if v_end <= 0:
            continue
        repair = base_repair(result.w[order][i], spec.length(i), data.q[i - 1] if order == BASE_INTEGER else None)
        layer_prev = result.layers.get(prev, {}).get(i) if prev is not None else None
        result.layers[order][i] = build_layer_term(
            order, layer_prev, TimeSignal(t, repair(t, 0)), v_end, edge=i, repair=repair
        )
        audit.add_edge(_label("w", order), _label("Pi", order, i))
        if prev is not None:
            audit.add_edge(_label("Pi", prev, i), _label("Pi", order, i))


# ---------------------------------------------------------------- zones and evaluation


def classify_zone(spec: NetworkSpec, points: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Zone name and edge index of every point; zone intervals are closed on the lower end."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    eps = spec.eps
    a = eps * spec.ell0
    tol = 1e-12 * max(1.0, max(spec.ell))
    zone = np.full(len(points), "", dtype=object)
    edge = np.full(len(points), -1)

    in_cube = np.all(np.abs(points) <= a + tol, axis=1)
    zone[in_cube] = "node_region"
    edge[in_cube] = NODE_REGION
    inner = 2.0 * spec.ell0 * eps**spec.gamma
    outer = 3.0 * spec.ell0 * eps**spec.gamma
    for i in EDGES:
        ax = i - 1
        ta, tb = transverse_axes(i)
        xi = points[:, ax]
        radial = np.hypot(points[:, ta], points[:, tb])
        inside = (~in_cube) & (xi >= a - tol) & (xi <= spec.length(i) + tol) & (radial <= eps * spec.radius(i) + tol)
        inside &= edge < 0
        edge[inside] = i
        zone[inside & (xi < inner)] = "node_region"
        zone[inside & (xi >= inner) & (xi < outer)] = "blend"
        zone[inside & (xi >= outer) & (xi < spec.length(i) - 2 * delta)] = "cyl_far"
        zone[inside & (xi >= spec.length(i) - 2 * delta) & (xi >= outer)] = "base_layer"
    if np.any(edge < 0):
        bad = points[np.argmax(edge < 0)]
        raise OutOfDomain(f"point {tuple(bad)} lies outside the thin junction")
    return zone.astype(str), edge


def regular_value(
    setM: ExpansionOrderSet, order: Order, i: int, points: np.ndarray, t: np.ndarray, dx: int = 0, dt: int = 0
) -> np.ndarray:
    """w + u of one order on cylinder i (u enters only undifferentiated in x)."""
    eps = setM.spec.eps
    ta, tb = transverse_axes(i)
    xi = points[:, i - 1]
    value = setM.w[order][i](xi, t, dx=dx, dt=dt)
    u = setM.u[order][i]
    if not u.is_zero and dx == 0 and dt == 0:
        y1, y2 = points[:, ta] / eps, points[:, tb] / eps
        value = value + u(xi, np.hypot(y1, y2), np.arctan2(y2, y1), t)
    return value


def _order_values(
    setM: ExpansionOrderSet, order: Order, points: np.ndarray, t: np.ndarray, zone: np.ndarray, edge: np.ndarray
) -> np.ndarray:
    spec = setM.spec
    eps = spec.eps
    out = np.zeros(len(points))
    node_sel = zone == "node_region"
    if np.any(node_sel):
        out[node_sel] = setM.node[order].full(points[node_sel] / eps, t[node_sel])
    for i in EDGES:
        cyl = (edge == i) & ~node_sel
        if not np.any(cyl):
            continue
        pts, ts = points[cyl], t[cyl]
        value = regular_value(setM, order, i, pts, ts)
        blend = zone[cyl] == "blend"
        if np.any(blend):
            chi = cutoff_chi_ell0(pts[blend, i - 1] / eps**spec.gamma, spec.ell0)
            inner = setM.node[order].full(pts[blend] / eps, ts[blend])
            value[blend] = chi * value[blend] + (1.0 - chi) * inner
        layer = setM.layers.get(order, {}).get(i)
        if layer is not None:
            value = value + eval_layer(layer, spec, pts[:, i - 1], ts, eps, setM.delta)
        out[cyl] = value
    return out


def evaluate(
    setM: ExpansionOrderSet,
    points: np.ndarray,
    t: np.ndarray,
    M: Optional[int] = None,
    breakdown: bool = False,
) -> np.ndarray:
    """Partial sum at points (n, 3) and times t; M selects a shorter partial sum of the same set."""
    spec = setM.spec
    points = np.atleast_2d(np.asarray(points, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(points),)).copy()
    if np.any(t < -1e-12) or np.any(t > spec.T + 1e-12):
        raise OutOfDomain(f"times must lie in [0, {spec.T}]")
    zone, edge = classify_zone(spec, points, setM.delta)
    orders = partial_sum_orders(spec.alpha, M if M is not None else setM.M)
    missing = [o for o in orders if o not in setM.w]
    if missing:
        raise ValueError(f"orders {[o.label() for o in missing]} were not built (M = {setM.M})")
    parts = np.zeros((len(orders), len(points)))
    for row, order in enumerate(orders):
        parts[row] = spec.eps ** order.exponent(spec.alpha) * _order_values(setM, order, points, t, zone, edge)
    if breakdown:
        return parts
    return parts.sum(axis=0)


def evaluate_frame(setM: ExpansionOrderSet, frame: pd.DataFrame, M: Optional[int] = None) -> pd.DataFrame:
    """Evaluate at the rows of a frame with columns x, y, z, t."""
    missing = {"x", "y", "z", "t"} - set(frame.columns)
    if missing:
        raise ValueError(f"missing columns: {', '.join(sorted(missing))}")
    points = frame[["x", "y", "z"]].to_numpy(dtype=float)
    t = frame["t"].to_numpy(dtype=float)
    orders = partial_sum_orders(setM.alpha, M if M is not None else setM.M)
    parts = evaluate(setM, points, t, M=M, breakdown=True)
    zone, edge = classify_zone(setM.spec, points, setM.delta)
    out = frame[["x", "y", "z", "t"]].copy()
    out["value"] = parts.sum(axis=0)
    out["zone"] = [z if e == NODE_REGION or z == "node_region" else f"{z}_{e}" for z, e in zip(zone, edge)]
    for order, row in zip(orders, parts):
        out[f"eps^{order.exponent(setM.alpha):g}"] = row
    return out


def evaluate_csv(setM: ExpansionOrderSet, in_path: Path, out_path: Path, M: Optional[int] = None) -> Path:
    """Batch evaluation: CSV with x, y, z, t in; value, zone and per-exponent parts out."""
    frame = pd.read_csv(in_path)
    result = evaluate_frame(setM, frame, M=M)
    out_path = Path(out_path)
    result.to_csv(out_path, index=False, float_format="%.12e")
    return out_path


def coefficient_frames(setM: ExpansionOrderSet, stride: int = 1) -> Dict[str, pd.DataFrame]:
    """Tables of the regular coefficients, gluing constants and boundary-layer coefficients."""
    frames: Dict[str, pd.DataFrame] = {}
    for order in setM.orders:
        for i in EDGES:
            frames[f"w_{order.label()}_edge{i}"] = setM.w[order][i].to_frame(stride)
        g = setM.gluing[order]
        frames[f"d_{order.label()}"] = pd.DataFrame({"t": g.t, "d": g.values, **g.components})
        for i, layer in setM.layers.get(order, {}).items():
            table = {"t": layer.t}
            table.update({f"a{j}": layer.coeffs[j] for j in range(layer.degree + 1)})
            frames[f"Pi_{order.label()}_edge{i}"] = pd.DataFrame(table)
    return frames


def node_summary(setM: ExpansionOrderSet) -> pd.DataFrame:
    """Decay fits and solvability diagnostics of every node-layer order."""
    rows = []
    for order, field_ in setM.node.items():
        rows.append(
            {
                "order": order.label(),
                "exponent": order.exponent(setM.alpha),
                "max_abs": float(np.max(np.abs(field_.values))) if field_.values.size else 0.0,
                "solvability_defect": field_.solvability_defect,
                "cap_ratio": field_.cap_ratio,
                "min_beta0": field_.min_decay_rate,
                **{f"beta0_{i}": field_.decay_rates[i - 1] for i in EDGES},
                **{f"beta0_band_{i}": field_.decay_band[i - 1] for i in EDGES},
            }
        )
    return pd.DataFrame(rows)


def voxel_frames(setM: ExpansionOrderSet, axis: int = 2) -> Dict[str, pd.DataFrame]:
    """ASCII voxel dumps: the node mesh, the node potential and a slice of every nonzero node field."""
    frames: Dict[str, pd.DataFrame] = {}
    mesh, potential = setM.velocity.mesh, setM.velocity.potential
    if mesh is not None:
        frames["node_mesh"] = mesh.to_frame()
        if potential is not None:
            frames["node_potential"] = potential.to_frame(mesh)
    for order, field_ in setM.node.items():
        if not field_.is_zero:
            frames[f"N_{order.label()}_slice"] = field_.slice_frame(axis=axis)
    return frames


def dependency_edges(setM: ExpansionOrderSet) -> Sequence[Tuple[str, str]]:
    return sorted(setM.audit.edges())
