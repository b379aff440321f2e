"""Residuals of the partial sums, errors against the reference solver and eps sweeps."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, stats

from junctionflow.boundary_layer import eval_layer
from junctionflow.config import RunConfig
from junctionflow.errors import GridMismatch, JunctionFlowError, SweepFailure
from junctionflow.expansion import ExpansionOrderSet, build_expansion, evaluate, regular_value
from junctionflow.geometry import EDGES, NODE_REGION, NetworkSpec, check_network, cutoff_chi_ell0, transverse_axes
from junctionflow.orders import (
    blend_residual_exponent,
    cylinder_residual_exponents,
    energy_error_rate,
    last_orders,
    lateral_residual_exponents,
    minimal_M,
    partial_sum_orders,
    sup_error_index,
    sup_error_rate,
)
from junctionflow.reference import ReferenceSolution, reference_mesh, solve_reference
from junctionflow.utils import console, make_progress, write_csv
from junctionflow.velocity import EdgeVelocity, eval_velocity

PointFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

# share of the residual samples per zone; the remainder goes to the lateral surface
ZONE_SHARE = {"node_region": 0.25, "blend": 0.25, "cyl_far": 0.2, "base_layer": 0.15}


@dataclass
class ResidualReport:
    """Sup estimates of the residual of one partial sum, with the orders they should scale with."""

    M: int
    alpha: float
    gamma: float
    eps: float
    interior_residual_by_zone: Dict[str, float]
    lateral_residual: float
    predicted_orders: Dict[str, float]
    sample_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def ratios(self) -> Dict[str, float]:
        residuals = dict(self.interior_residual_by_zone, lateral=self.lateral_residual)
        return {zone: value / self.eps ** self.predicted_orders[zone] for zone, value in residuals.items()}

    def to_frame(self) -> pd.DataFrame:
        residuals = dict(self.interior_residual_by_zone, lateral=self.lateral_residual)
        ratios = self.ratios
        return pd.DataFrame(
            [
                {
                    "eps": self.eps,
                    "M": self.M,
                    "zone": zone,
                    "residual": residuals[zone],
                    "predicted_order": self.predicted_orders[zone],
                    "ratio": ratios[zone],
                    "samples": self.sample_counts.get(zone, 0),
                }
                for zone in sorted(residuals)
            ]
        )


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float


@dataclass
class ConvergenceReport:
    """Errors of the partial sums over a list of eps, with log-log slopes once three eps are present."""

    M: int
    P: int
    eps_list: List[float]
    sup_errors: List[float]
    energy_errors: List[float]
    predicted: Dict[str, float]
    fitted_slopes: Dict[str, SlopeFit] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "eps": self.eps_list,
                "M": self.M,
                "P": self.P,
                "sup_error": self.sup_errors,
                "energy_error": self.energy_errors,
                "predicted_sup": self.predicted["sup"],
                "predicted_energy": self.predicted["energy"],
            }
        )

    def slopes_frame(self) -> pd.DataFrame:
        rows = []
        for name, fit in sorted(self.fitted_slopes.items()):
            rows.append(
                {
                    "M": self.M,
                    "quantity": name,
                    "slope": fit.slope,
                    "ci_low": fit.ci_low,
                    "ci_high": fit.ci_high,
                    "predicted": self.predicted[name],
                }
            )
        return pd.DataFrame(rows, columns=["M", "quantity", "slope", "ci_low", "ci_high", "predicted"])


def fit_slope(eps: List[float], values: List[float], confidence: float = 0.95) -> Optional[SlopeFit]:
    """Least-squares slope of log(value) against log(eps); None below three usable points."""
    eps_arr = np.asarray(eps, dtype=float)
    val = np.asarray(values, dtype=float)
    usable = np.isfinite(val) & (val > 0)
    if usable.sum() < 3:
        return None
    fit = stats.linregress(np.log(eps_arr[usable]), np.log(val[usable]))
    spread = stats.t.ppf(0.5 + confidence / 2, usable.sum() - 2) * fit.stderr
    return SlopeFit(
        float(fit.slope), float(fit.intercept), float(fit.stderr), float(fit.slope - spread), float(fit.slope + spread)
    )


# ---------------------------------------------------------------- residuals


def _cylinder_points(
    rng: np.random.Generator, i: int, lo: float, hi: float, r_max: float, n: int, surface: bool = False
) -> np.ndarray:
    ta, tb = transverse_axes(i)
    points = np.zeros((n, 3))
    points[:, i - 1] = rng.uniform(lo, hi, n)
    r = np.full(n, r_max) if surface else r_max * np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(0.0, 2 * np.pi, n)
    points[:, ta] = r * np.cos(theta)
    points[:, tb] = r * np.sin(theta)
    return points


def _split(n: int, parts: int) -> List[int]:
    base = [n // parts] * parts
    for k in range(n % parts):
        base[k] += 1
    return base


# central stencils: reach -> (offsets, first-derivative weights, second-derivative weights, centre weight)
_STENCILS = {
    1: ((-1, 1), (-0.5, 0.5), (1.0, 1.0), -2.0),
    2: ((-2, -1, 1, 2), (1 / 12, -8 / 12, 8 / 12, -1 / 12), (-1 / 12, 16 / 12, 16 / 12, -1 / 12), -30 / 12),
}


def _advection_diffusion_residual(
    f: PointFunction,
    eps: float,
    velocity: np.ndarray,
    divergence: np.ndarray,
    points: np.ndarray,
    t: np.ndarray,
    hx: float,
    ht: float,
    reach: int = 2,
) -> np.ndarray:
    """du/dt - eps Lap u + V.grad u + div(V) u by central differences of the given reach."""
    offsets, w1, w2, w0 = _STENCILS[reach]
    f0 = f(points, t)
    advection = np.zeros(len(points))
    lap = 3 * w0 * f0 / hx**2
    for axis in range(3):
        for k, a1, a2 in zip(offsets, w1, w2):
            p = points.copy()
            p[:, axis] += k * hx
            value = f(p, t)
            advection += velocity[:, axis] * a1 * value / hx
            lap += a2 * value / hx**2
    t_offsets, t_weights, _, _ = _STENCILS[2]
    dt = sum(w * f(points, t + k * ht) for k, w in zip(t_offsets, t_weights)) / ht
    return dt - eps * lap + advection + divergence * f0


def _transport_residual(
    f: PointFunction,
    eps: float,
    edge: EdgeVelocity,
    points: np.ndarray,
    t: np.ndarray,
    hx: float,
    ht: float,
    reach: int = 2,
) -> np.ndarray:
    """du/dt - eps Lap u + div(V u) on cylinder i by central differences."""
    i = edge.edge
    ax = i - 1
    ta, tb = transverse_axes(i)
    x = points[:, ax]
    y1, y2 = points[:, ta] / eps, points[:, tb] / eps
    velocity = np.zeros_like(points)
    velocity[:, ax] = edge.axial(x)
    divergence = edge.axial_derivative(x)
    if edge.has_transverse:
        vbar = edge.transverse(x, y1, y2)
        velocity[:, ta], velocity[:, tb] = eps * vbar[:, 0], eps * vbar[:, 1]
        divergence = divergence + edge.v_transverse[0].diff("y1")(x=x, y1=y1, y2=y2)
        divergence = divergence + edge.v_transverse[1].diff("y2")(x=x, y1=y1, y2=y2)
    return _advection_diffusion_residual(f, eps, velocity, divergence, points, t, hx, ht, reach)


def _node_cube_residual(setM: ExpansionOrderSet, points: np.ndarray, t: np.ndarray, hn: float, ht: float) -> np.ndarray:
    """Transport residual of the inner sum in the node cube, advected by the potential velocity."""
    velocity = eval_velocity(setM.velocity, NODE_REGION, points)
    # the potential velocity is divergence free cell by cell
    divergence = np.zeros(len(points))
    inner = _inner_sum(setM)
    return _advection_diffusion_residual(inner, setM.spec.eps, velocity, divergence, points, t, hn, ht, reach=1)


def _node_time_derivative(setM: ExpansionOrderSet, points: np.ndarray, t: np.ndarray) -> np.ndarray:
    """sum over the last order of each chain of eps^e dN_e/dt at x/eps."""
    eps = setM.spec.eps
    out = np.zeros(len(points))
    for order in last_orders(setM.alpha, setM.M):
        node = setM.node[order]
        if node.is_zero:
            continue
        ht = 0.5 * float(np.min(np.diff(node.times)))
        tp = np.clip(t + ht, 0.0, setM.spec.T)
        tm = np.clip(t - ht, 0.0, setM.spec.T)
        derivative = (node.full(points / eps, tp) - node.full(points / eps, tm)) / (tp - tm)
        out += eps ** order.exponent(setM.alpha) * derivative
    return out


def _regular_sum(setM: ExpansionOrderSet, i: int) -> PointFunction:
    spec = setM.spec

    def value(points: np.ndarray, t: np.ndarray) -> np.ndarray:
        t = np.broadcast_to(t, (len(points),))
        total = np.zeros(len(points))
        for order in setM.orders:
            part = regular_value(setM, order, i, points, t)
            layer = setM.layers.get(order, {}).get(i)
            if layer is not None:
                part = part + eval_layer(layer, spec, points[:, i - 1], t, spec.eps, setM.delta)
            total += spec.eps ** order.exponent(setM.alpha) * part
        return total

    return value


def _inner_sum(setM: ExpansionOrderSet) -> PointFunction:
    eps = setM.spec.eps

    def value(points: np.ndarray, t: np.ndarray) -> np.ndarray:
        t = np.broadcast_to(t, (len(points),))
        total = np.zeros(len(points))
        for order in setM.orders:
            total += eps ** order.exponent(setM.alpha) * setM.node[order].full(points / eps, t)
        return total

    return value


def _blend_residual(
    setM: ExpansionOrderSet, i: int, points: np.ndarray, t: np.ndarray, hx: float, ht: float
) -> np.ndarray:
    """chi L[R] + (1 - chi) L[N] plus the cut-off commutator acting on R - N."""
    spec = setM.spec
    eps = spec.eps
    edge = setM.velocity.edge(i)
    regular = _regular_sum(setM, i)
    inner = _inner_sum(setM)
    s = points[:, i - 1] / eps**spec.gamma
    chi = cutoff_chi_ell0(s, spec.ell0)
    chi1 = cutoff_chi_ell0(s, spec.ell0, 1) / eps**spec.gamma
    chi2 = cutoff_chi_ell0(s, spec.ell0, 2) / eps ** (2 * spec.gamma)

    res_regular = _transport_residual(regular, eps, edge, points, t, hx, ht)
    res_inner = _node_time_derivative(setM, points, t)

    hn = eps * setM.operator.mesh.spacing if setM.operator is not None else hx
    step = np.zeros(3)
    step[i - 1] = hn
    gap = regular(points, t) - inner(points, t)
    gap_x = (
        regular(points + step, t) - inner(points + step, t) - regular(points - step, t) + inner(points - step, t)
    ) / (2 * hn)
    commutator = -eps * (chi2 * gap + 2 * chi1 * gap_x) + edge.axial(points[:, i - 1]) * chi1 * gap
    return chi * res_regular + (1 - chi) * res_inner + commutator


def _lateral_residual(setM: ExpansionOrderSet, i: int, points: np.ndarray, t: np.ndarray, hx: float) -> np.ndarray:
    """-eps dU/dnu + U V.nu - eps^alpha phi on the lateral surface, one-sided differences inward."""
    spec = setM.spec
    eps = spec.eps
    ta, tb = transverse_axes(i)
    theta = np.arctan2(points[:, tb], points[:, ta])
    normal = np.zeros_like(points)
    normal[:, ta], normal[:, tb] = np.cos(theta), np.sin(theta)
    values = [evaluate(setM, points - k * hx * normal, t) for k in range(5)]
    f0, f1, f2, f3, f4 = values
    dnu = (25 * f0 - 48 * f1 + 36 * f2 - 16 * f3 + 3 * f4) / (12 * hx)
    edge = setM.velocity.edge(i)
    x = points[:, i - 1]
    flux_velocity = np.zeros(len(points))
    if edge.has_transverse:
        vbar = edge.transverse(x, points[:, ta] / eps, points[:, tb] / eps)
        flux_velocity = eps * (vbar[:, 0] * normal[:, ta] + vbar[:, 1] * normal[:, tb])
    phi = setM.data.phi[i - 1](theta=theta, x=x, t=t)
    return -eps * dnu + f0 * flux_velocity - eps**spec.alpha * phi


def predicted_residual_orders(alpha: float, gamma: float, M: int) -> Dict[str, float]:
    cylinder = min(cylinder_residual_exponents(alpha, M))
    return {
        "node_region": cylinder,
        "blend": blend_residual_exponent(alpha, gamma, M),
        "cyl_far": cylinder,
        "base_layer": cylinder,
        "lateral": min(lateral_residual_exponents(alpha, M)),
    }


def measure_residuals(
    setM: ExpansionOrderSet, sample_count: int = 10000, seed: int = 0, step: float = 0.05
) -> ResidualReport:
    """Stratified sup estimates of the interior residual per zone and of the lateral residual."""
    spec = setM.spec
    eps = spec.eps
    rng = np.random.default_rng(seed)
    hx = step * eps * min(spec.h)
    ht = 1e-3 * spec.T
    a = eps * spec.ell0
    inner = 2.0 * spec.ell0 * eps**spec.gamma
    outer = 3.0 * spec.ell0 * eps**spec.gamma

    def times(n: int, margin: float) -> np.ndarray:
        return rng.uniform(margin, spec.T - margin, n)

    residuals: Dict[str, float] = {zone: 0.0 for zone in ZONE_SHARE}
    counts: Dict[str, int] = {zone: 0 for zone in list(ZONE_SHARE) + ["lateral"]}
    lateral = 0.0
    budget = {zone: int(share * sample_count) for zone, share in ZONE_SHARE.items()}
    budget_lateral = sample_count - sum(budget.values())

    # node zone: the cube and the cylinder ends inside the inner matching radius, differenced
    # on the node-mesh scale and kept one stencil inside the walls
    hn = eps * setM.operator.mesh.spacing if setM.operator is not None else hx
    margin = min(1.5 * hn, 0.5 * a)
    n_cube, *n_ends = _split(budget["node_region"], 4)
    inner_sum = _inner_sum(setM)
    if n_cube:
        cube = rng.uniform(-a + margin, a - margin, (n_cube, 3))
        value = _node_cube_residual(setM, cube, times(n_cube, 3 * ht), hn, ht)
        residuals["node_region"] = float(np.max(np.abs(value)))
        counts["node_region"] += n_cube
    for i, n in zip(EDGES, n_ends):
        if not n:
            continue
        r_max = max(eps * spec.radius(i) - margin, 0.5 * eps * spec.radius(i))
        pts = _cylinder_points(rng, i, a, max(a, inner), r_max, n)
        value = _transport_residual(inner_sum, eps, setM.velocity.edge(i), pts, times(n, 3 * ht), hn, ht, reach=1)
        residuals["node_region"] = max(residuals["node_region"], float(np.max(np.abs(value))))
        counts["node_region"] += n

    shares = zip(*(_split(budget[zone], 3) for zone in ("blend", "cyl_far", "base_layer")), _split(budget_lateral, 3))
    for i, (n_blend, n_far, n_base, n_lat) in zip(EDGES, shares):
        edge = setM.velocity.edge(i)
        length = spec.length(i)
        r_in = eps * spec.radius(i) - 2.5 * hx
        base_start = max(outer, length - 2 * setM.delta)

        def full(points: np.ndarray, t: np.ndarray) -> np.ndarray:
            return evaluate(setM, points, t)

        if n_blend and outer > inner:
            # denser near both interfaces: half the points uniform, half beta-distributed to the ends
            u = np.concatenate([rng.uniform(0, 1, n_blend - n_blend // 2), rng.beta(0.5, 0.5, n_blend // 2)])
            pts = _cylinder_points(rng, i, 0.0, 1.0, r_in, n_blend)
            pts[:, i - 1] = inner + (outer - inner) * u * (1 - 1e-9)
            value = _blend_residual(setM, i, pts, times(n_blend, 3 * ht), hx, ht)
            residuals["blend"] = max(residuals["blend"], float(np.max(np.abs(value))))
            counts["blend"] += n_blend
        if n_far and base_start > outer:
            pts = _cylinder_points(rng, i, outer + 2 * hx, base_start, r_in, n_far)
            value = _transport_residual(full, eps, edge, pts, times(n_far, 3 * ht), hx, ht)
            residuals["cyl_far"] = max(residuals["cyl_far"], float(np.max(np.abs(value))))
            counts["cyl_far"] += n_far
        if n_base and length - 2.5 * hx > base_start:
            pts = _cylinder_points(rng, i, base_start, length - 2.5 * hx, r_in, n_base)
            value = _transport_residual(full, eps, edge, pts, times(n_base, 3 * ht), hx, ht)
            residuals["base_layer"] = max(residuals["base_layer"], float(np.max(np.abs(value))))
            counts["base_layer"] += n_base
        if n_lat and length > outer:
            pts = _cylinder_points(rng, i, outer, length, eps * spec.radius(i), n_lat, surface=True)
            value = _lateral_residual(setM, i, pts, times(n_lat, 0.0), hx)
            lateral = max(lateral, float(np.max(np.abs(value))))
            counts["lateral"] += n_lat

    return ResidualReport(
        M=setM.M,
        alpha=setM.alpha,
        gamma=spec.gamma,
        eps=eps,
        interior_residual_by_zone=residuals,
        lateral_residual=lateral,
        predicted_orders=predicted_residual_orders(setM.alpha, spec.gamma, setM.M),
        sample_counts=counts,
    )


def repair_defects(setM: ExpansionOrderSet, n_samples: int = 200, seed: int = 0) -> Dict[str, float]:
    """Distance of the partial sum from q_i on the bases and from zero at t = 0."""
    spec = setM.spec
    rng = np.random.default_rng(seed)
    base = 0.0
    initial = 0.0
    for i in EDGES:
        length = spec.length(i)
        pts = _cylinder_points(rng, i, length, length, spec.eps * spec.radius(i), n_samples)
        t = rng.uniform(0.0, spec.T, n_samples)
        base = max(base, float(np.max(np.abs(evaluate(setM, pts, t) - setM.data.q[i - 1](t=t)))))
        pts = _cylinder_points(rng, i, spec.eps * spec.ell0, length, spec.eps * spec.radius(i), n_samples)
        initial = max(initial, float(np.max(np.abs(evaluate(setM, pts, np.zeros(n_samples))))))
    return {"base": base, "initial": initial}


def node_decay(setM: ExpansionOrderSet) -> Dict[str, float]:
    """Smallest fitted decay rate and largest cap ratio over the nonzero node fields."""
    fields = [f for f in setM.node.values() if not f.is_zero]
    rates = [f.min_decay_rate for f in fields if np.isfinite(f.min_decay_rate)]
    return {
        "min_beta0": min(rates) if rates else float("nan"),
        "cap_ratio": max((f.cap_ratio for f in fields), default=0.0),
    }


# ---------------------------------------------------------------- errors against the reference


def _check_grids(spec: NetworkSpec, other: NetworkSpec) -> None:
    same = (
        np.isclose(spec.T, other.T)
        and np.isclose(spec.ell0, other.ell0)
        and np.allclose(spec.ell, other.ell)
        and np.allclose(spec.h, other.h)
        and np.isclose(spec.alpha, other.alpha)
    )
    if not same:
        raise GridMismatch("expansion and reference solution describe different junctions")


def sampled_reference(setM: ExpansionOrderSet, mesh, times: np.ndarray, M: Optional[int] = None) -> ReferenceSolution:
    """A partial sum sampled at the cell centres of a mesh, shaped like a reference solution."""
    centers = mesh.centers
    values = np.array([evaluate(setM, centers, np.full(len(centers), tk), M=M) for tk in times])
    return ReferenceSolution(
        mesh=mesh,
        spec=setM.spec,
        times=np.asarray(times, dtype=float),
        values=values,
        ledger=pd.DataFrame(columns=["relative_defect"]),
        min_value=float(values.min()),
        surface_area_defect=0.0,
        temporal_error_estimate=0.0,
    )


def measure_errors(
    setM: ExpansionOrderSet,
    ref: ReferenceSolution,
    n_times: int = 11,
    P: Optional[int] = None,
    energy_index: Optional[int] = None,
) -> ConvergenceReport:
    """Sup error of U_P and scaled gradient error of U_{P+1} at the reference cell centres."""
    _check_grids(setM.spec, ref.spec)
    if ref.times[-1] < setM.spec.T * (1 - 1e-9) or ref.times[0] > 1e-12:
        raise GridMismatch(f"reference covers [{ref.times[0]}, {ref.times[-1]}], expected [0, {setM.spec.T}]")
    if not np.isclose(setM.spec.eps, ref.spec.eps):
        setM = setM.with_eps(ref.spec.eps)
    alpha, gamma = setM.alpha, setM.spec.gamma
    P = sup_error_index(alpha, gamma, setM.M) if P is None else P
    energy_index = min(P + 1, setM.M) if energy_index is None else energy_index
    top = max(P, energy_index)
    if top > setM.M:
        raise GridMismatch(f"partial sum {top} needs an expansion with M >= {top}, got M = {setM.M}")

    mesh = ref.mesh
    centers = mesh.centers
    all_orders = partial_sum_orders(alpha, top)
    rows_sup = [k for k, o in enumerate(all_orders) if o in partial_sum_orders(alpha, P)]
    rows_energy = [k for k, o in enumerate(all_orders) if o in partial_sum_orders(alpha, energy_index)]
    levels = np.unique(np.round(np.linspace(0, len(ref.times) - 1, n_times)).astype(int))

    a, b, area, s = mesh.face_a, mesh.face_b, mesh.face_area, mesh.spacing
    sup = 0.0
    gradient_sq = np.zeros(len(levels))
    for row, k in enumerate(levels):
        parts = evaluate(setM, centers, np.full(len(centers), ref.times[k]), M=top, breakdown=True)
        sup = max(sup, float(np.max(np.abs(ref.values[k] - parts[rows_sup].sum(axis=0)))))
        err = ref.values[k] - parts[rows_energy].sum(axis=0)
        gradient_sq[row] = float(np.sum(((err[b] - err[a]) / s) ** 2 * area * s))
    times = ref.times[levels]
    integral = float(integrate.trapezoid(gradient_sq, times)) if len(times) > 1 else 0.0
    energy = np.sqrt(integral / mesh.total_volume())

    return ConvergenceReport(
        M=setM.M,
        P=P,
        eps_list=[float(ref.spec.eps)],
        sup_errors=[sup],
        energy_errors=[float(energy)],
        predicted={"sup": sup_error_rate(alpha, gamma, setM.M), "energy": energy_error_rate(alpha, gamma, setM.M)},
    )


def combine_reports(reports: List[ConvergenceReport]) -> ConvergenceReport:
    """Merge single-eps reports of one M, sorted by eps, and fit the slopes."""
    if not reports:
        raise ValueError("no reports to combine")
    rows = sorted(
        ((e, s, g) for r in reports for e, s, g in zip(r.eps_list, r.sup_errors, r.energy_errors)), reverse=True
    )
    eps = [r[0] for r in rows]
    merged = ConvergenceReport(
        M=reports[0].M,
        P=reports[0].P,
        eps_list=eps,
        sup_errors=[r[1] for r in rows],
        energy_errors=[r[2] for r in rows],
        predicted=dict(reports[0].predicted),
    )
    for name, values in (("sup", merged.sup_errors), ("energy", merged.energy_errors)):
        fit = fit_slope(eps, values)
        if fit is not None:
            merged.fitted_slopes[name] = fit
    return merged


def self_consistency(errors_coarse: ConvergenceReport, errors_fine: ConvergenceReport) -> float:
    """Largest relative change of the measured errors when the reference grid is refined."""
    change = 0.0
    pairs = (
        (errors_coarse.sup_errors, errors_fine.sup_errors),
        (errors_coarse.energy_errors, errors_fine.energy_errors),
    )
    for coarse, fine in pairs:
        for c, f in zip(coarse, fine):
            if f > 0:
                change = max(change, abs(c - f) / f)
    return change


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepResult:
    residuals: List[ResidualReport] = field(default_factory=list)
    convergence: List[ConvergenceReport] = field(default_factory=list)
    repairs: Dict[int, Dict[str, float]] = field(default_factory=dict)
    ledger_defects: Dict[float, float] = field(default_factory=dict)
    node_decay: Dict[int, Dict[str, float]] = field(default_factory=dict)
    self_check: Dict[float, float] = field(default_factory=dict)
    files: List[Path] = field(default_factory=list)

    def residual_frame(self) -> pd.DataFrame:
        frames = [r.to_frame() for r in self.residuals]
        columns = ["eps", "M", "zone", "residual", "predicted_order", "ratio", "samples"]
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)

    def residual_slopes(self) -> pd.DataFrame:
        """Log-log slopes of every zone residual across eps, per M."""
        frame = self.residual_frame()
        rows = []
        for (M, zone), group in frame.groupby(["M", "zone"], sort=True):
            group = group.sort_values("eps", ascending=False)
            fit = fit_slope(group["eps"].tolist(), group["residual"].tolist())
            if fit is not None:
                rows.append(
                    {
                        "M": M,
                        "quantity": f"residual_{zone}",
                        "slope": fit.slope,
                        "ci_low": fit.ci_low,
                        "ci_high": fit.ci_high,
                        "predicted": float(group["predicted_order"].iloc[0]),
                    }
                )
        return pd.DataFrame(rows, columns=["M", "quantity", "slope", "ci_low", "ci_high", "predicted"])

    def error_frame(self) -> pd.DataFrame:
        frames = [r.to_frame() for r in self.convergence]
        columns = ["eps", "M", "P", "sup_error", "energy_error", "predicted_sup", "predicted_energy"]
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)

    def slope_frame(self) -> pd.DataFrame:
        frames = [r.slopes_frame() for r in self.convergence] + [self.residual_slopes()]
        frames = [f for f in frames if len(f)]
        columns = ["M", "quantity", "slope", "ci_low", "ci_high", "predicted"]
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)


def construction_order(run: RunConfig, m: int) -> int:
    """Order of the construction used to verify the partial sum m: at least the smallest admissible M."""
    return max(m, minimal_M(run.network.alpha))


def _solve_reference_at(run: RunConfig, eps: float, cells_per_radius: int, verbose: bool) -> ReferenceSolution:
    spec = run.network.with_eps(eps)
    velocity = replace(run.velocity, spec=spec)
    mesh = reference_mesh(spec, cells_per_radius)
    numerics = run.numerics
    n_steps = max(1, int(round(spec.T / numerics.ref_dt)))
    return solve_reference(
        spec,
        run.data,
        mesh,
        numerics.ref_dt,
        velocity,
        scheme=numerics.ref_scheme,
        limiter=numerics.ref_limiter,
        store_every=max(1, n_steps // 50),
        verbose=verbose,
    )


def sweep(
    run: RunConfig, out_dir: Optional[Path] = None, with_errors: bool = True, verbose: bool = False
) -> SweepResult:
    """Residuals (and errors against the reference) for every (eps, M) pair of the verification settings."""
    result = SweepResult()
    eps_list = sorted(run.verification.eps_list, reverse=True)
    failures: List[Tuple[str, JunctionFlowError]] = []
    for eps in eps_list:
        check_network(run.network.with_eps(eps))

    references: Dict[float, ReferenceSolution] = {}
    fine: Dict[float, ReferenceSolution] = {}
    if with_errors and eps_list:
        if verbose:
            console.print(f"🧮 Reference solves for eps = {', '.join(f'{e:g}' for e in eps_list)}")

        def solve(eps: float, cells: int) -> Tuple[float, object]:
            try:
                return eps, _solve_reference_at(run, eps, cells, verbose=False)
            except JunctionFlowError as e:
                return eps, e

        jobs = [(eps, run.numerics.ref_cells_per_radius) for eps in eps_list]
        with ThreadPoolExecutor(max_workers=run.threads) as pool:
            outcomes = list(pool.map(lambda job: solve(*job), jobs))
        for eps, outcome in outcomes:
            if isinstance(outcome, JunctionFlowError):
                failures.append((f"reference eps={eps:g}", outcome))
            else:
                references[eps] = outcome  # type: ignore[assignment]
                result.ledger_defects[eps] = outcome.max_ledger_defect  # type: ignore[union-attr]
        if run.verification.self_check:
            for eps in references:
                fine[eps] = _solve_reference_at(run, eps, 2 * run.numerics.ref_cells_per_radius, verbose=False)

    with make_progress(disable=not verbose) as progress:
        task = progress.add_task("📊 Sweep...", total=len(run.verification.M_list) * len(eps_list))
        for m in run.verification.M_list:
            M = construction_order(run, m)
            try:
                setM = build_expansion(
                    run.network, run.data, run.velocity, M, run.numerics, seed=run.seed, threads=run.threads
                )
            except JunctionFlowError as e:
                failures.append((f"expansion M={M}", e))
                progress.advance(task, len(eps_list))
                continue
            result.repairs[M] = repair_defects(setM, seed=run.seed)
            result.node_decay[M] = node_decay(setM)
            reports: List[ConvergenceReport] = []
            for eps in eps_list:
                progress.update(task, description=f"📊 M = {M}, eps = {eps:g}")
                scaled = setM.with_eps(eps)
                try:
                    result.residuals.append(measure_residuals(scaled, run.verification.samples, seed=run.seed))
                    if eps in references:
                        report = measure_errors(scaled, references[eps])
                        reports.append(report)
                        if eps in fine:
                            result.self_check[eps] = self_consistency(report, measure_errors(scaled, fine[eps]))
                except JunctionFlowError as e:
                    failures.append((f"M={M} eps={eps:g}", e))
                progress.advance(task)
            if reports:
                result.convergence.append(combine_reports(reports))

    if out_dir is not None:
        out_dir = Path(out_dir)
        result.files.append(write_csv(result.residual_frame(), out_dir / "residuals.csv"))
        if with_errors:
            result.files.append(write_csv(result.error_frame(), out_dir / "errors.csv"))
        result.files.append(write_csv(result.slope_frame(), out_dir / "slopes.csv"))
        # whitespace-separated copy for plotting tools
        errors = result.error_frame()
        if with_errors and len(errors):
            path = out_dir / "convergence.dat"
            errors.to_csv(path, sep=" ", index=False, float_format="%.10e")
            result.files.append(path)
    if failures:
        raise SweepFailure(failures)
    return result


def acceptance_failures(
    result: SweepResult,
    slope_tol: float = 0.25,
    ledger_tol: float = 1e-8,
    repair_tol: float = 1e-10,
    cap_tol: float = 1e-4,
) -> List[str]:
    """Names of the verification thresholds the sweep missed."""
    problems = []
    for M, decay in sorted(result.node_decay.items()):
        if decay["min_beta0"] <= 0.0:
            problems.append(f"M={M}: node layer does not decay (beta0 = {decay['min_beta0']:.3g})")
        if decay["cap_ratio"] > cap_tol:
            problems.append(f"M={M}: node layer keeps {decay['cap_ratio']:.2e} at the caps, above {cap_tol:g}")
    for M, defects in sorted(result.repairs.items()):
        for kind, value in defects.items():
            if value > repair_tol:
                problems.append(f"M={M}: {kind} repair defect {value:.2e} above {repair_tol:g}")
    for eps, defect in sorted(result.ledger_defects.items()):
        if defect > ledger_tol:
            problems.append(f"eps={eps:g}: reference mass ledger defect {defect:.2e} above {ledger_tol:g}")
    for eps, change in sorted(result.self_check.items()):
        if change >= 0.2:
            problems.append(f"eps={eps:g}: errors change by {change:.0%} under grid refinement")
    slopes = result.slope_frame()
    for row in slopes.itertuples(index=False):
        if row.quantity in ("sup", "energy", "residual_blend") and row.slope < row.predicted - slope_tol:
            problems.append(
                f"M={row.M}: {row.quantity} slope {row.slope:.3f} below {row.predicted:.3f} - {slope_tol:g}"
            )
    return problems
