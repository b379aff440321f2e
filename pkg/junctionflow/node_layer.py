"""Node-layer problems on the rescaled, truncated junction.

The node-layer coefficient is N = sum_i (w_i(0, t) + Psi_i(xi_i, t)) chi(xi_i) + N~,
where Psi_i is the Taylor polynomial of the regular part at the vertex and N~
solves a steady convection-diffusion problem for every sampled time with a
compactly supported source in each stub.
"""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sps
from scipy import stats
from scipy.sparse.linalg import LinearOperator, bicgstab, gmres, spilu, splu

from junctionflow.edge_transport import TimeSignal
from junctionflow.errors import SolvabilityDefect, SolverDiverged, TruncationError, TruncationWarning
from junctionflow.expressions import Expression
from junctionflow.geometry import EDGES, NODE_REGION, TAG_CODE, VoxelMesh, cutoff_chi_ell0
from junctionflow.orders import FIRST_INTERACTION, Order
from junctionflow.velocity import NodePotential

_GAUSS_POINTS = 8


class NodeLayerOperator:
    """Discrete -Laplace + V.grad on the truncated node domain, shared by all orders."""

    def __init__(
        self,
        mesh: VoxelMesh,
        potential: NodePotential,
        speeds: Sequence[float],
        solver: str = "direct",
        tol: float = 1e-11,
        maxiter: int = 20000,
        threads: int = 1,
    ):
        self.mesh = mesh
        self.potential = potential
        self.speeds = np.asarray(speeds, dtype=float)
        self.solver = solver
        self.tol = tol
        self.maxiter = maxiter
        self.threads = max(1, threads)
        self.ell0 = mesh.half_size
        self.matrix = self._assemble()
        self._lu = None
        self._ilu = None
        self.fallbacks = 0
        self._basis: Dict[Tuple[int, int], np.ndarray] = {}
        self.stub_cells = {i: mesh.cells_in(i) for i in EDGES}
        self.stub_axial = {i: mesh.centers[self.stub_cells[i], i - 1] for i in EDGES}
        self.node_faces = np.flatnonzero(mesh.bnd_tag == TAG_CODE["node"])

    def _face_velocity(self) -> np.ndarray:
        mesh = self.mesh
        vel = np.zeros(len(mesh.face_a))
        ra = mesh.region[mesh.face_a]
        rb = mesh.region[mesh.face_b]
        node_faces = (ra == NODE_REGION) | (rb == NODE_REGION)
        vel[node_faces] = self.potential.face_velocity[node_faces]
        for i in EDGES:
            axial = (ra == i) & (rb == i) & (mesh.face_axis == i - 1)
            vel[axial] = self.speeds[i - 1]
        return vel

    def _assemble(self) -> sps.csr_matrix:
        mesh = self.mesh
        s = mesh.spacing
        n = mesh.n_cells
        a, b, axis, area = mesh.face_a, mesh.face_b, mesh.face_axis, mesh.face_area
        vel = self._face_velocity()
        rows: List[np.ndarray] = []
        cols: List[np.ndarray] = []
        vals: List[np.ndarray] = []

        def add(r: np.ndarray, c: np.ndarray, v: np.ndarray) -> None:
            rows.append(r)
            cols.append(c)
            vals.append(v)

        diff = area / s
        add(a, a, diff)
        add(a, b, -diff)
        add(b, b, diff)
        add(b, a, -diff)

        # advective flux F * N_face leaves a and enters b; second-order upwind where possible
        flux = vel * area
        forward = flux >= 0
        upwind = np.where(forward, a, b)
        step = np.zeros((len(a), 3), dtype=np.int64)
        step[np.arange(len(a)), axis] = np.where(forward, -1, 1)
        far = mesh.lookup(mesh.ijk[upwind] + step)
        second = far >= 0
        w_up = np.where(second, 1.5, 1.0)
        w_far = np.where(second, -0.5, 0.0)
        far_safe = np.where(second, far, upwind)
        for owner, sign in ((a, 1.0), (b, -1.0)):
            add(owner, upwind, sign * flux * w_up)
            add(owner, far_safe, sign * flux * w_far)

        for i in EDGES:
            if self.speeds[i - 1] > 0:
                cap = mesh.bnd_tag == TAG_CODE[f"cap_{i}"]
                cells = mesh.bnd_cell[cap]
                add(cells, cells, self.speeds[i - 1] * mesh.bnd_area[cap])

        matrix = sps.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
        matrix.sum_duplicates()
        return matrix

    def stub_basis(self, i: int, j: int) -> np.ndarray:
        """Cell averages of the stub source generated by psi_j = xi^j / j! (psi_0 = 1)."""
        key = (i, j)
        if key not in self._basis:
            xi = self.stub_axial[i]
            s = self.mesh.spacing
            v = self.speeds[i - 1]
            lo, hi = xi - 0.5 * s, xi + 0.5 * s

            def psi(z: np.ndarray, d: int = 0) -> np.ndarray:
                if j - d < 0:
                    return np.zeros_like(z)
                return z ** (j - d) / math.factorial(j - d)

            chi1 = lambda z: cutoff_chi_ell0(z, self.ell0, 1)  # noqa: E731
            exact = (psi(hi) * chi1(hi) - psi(lo) * chi1(lo)) / s
            nodes, weights = np.polynomial.legendre.leggauss(_GAUSS_POINTS)
            z = 0.5 * (lo + hi)[:, None] + 0.5 * s * nodes[None, :]
            integrand = (psi(z, 1) - v * psi(z)) * chi1(z)
            self._basis[key] = exact + 0.5 * (integrand @ weights)
        return self._basis[key]

    def stub_integral(self, i: int, j: int) -> float:
        """Exact-area integral over stub i of the basis source, divided by pi."""
        return float(np.sum(self.stub_basis(i, j) * self.mesh.volume[self.stub_cells[i]]) / np.pi)

    def _direct(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is None:
            try:
                self._lu = splu(self.matrix.tocsc())
            except RuntimeError as e:
                raise SolverDiverged(f"node-layer factorization failed: {e}") from e
        return self._lu.solve(rhs)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for one or several right-hand sides (columns)."""
        rhs = np.atleast_2d(rhs.T).T
        out = np.zeros_like(rhs)
        active = [k for k in range(rhs.shape[1]) if np.any(rhs[:, k])]
        if not active:
            return out
        if self.solver == "direct":
            out[:, active] = self._direct(rhs[:, active])
            return out
        if self._ilu is None:
            try:
                self._ilu = spilu(self.matrix.tocsc(), drop_tol=1e-6, fill_factor=20)
            except RuntimeError:
                self.fallbacks += 1
                out[:, active] = self._direct(rhs[:, active])
                return out
        n = self.mesh.n_cells
        precond = LinearOperator((n, n), matvec=self._ilu.solve)
        method = bicgstab if self.solver == "bicgstab" else gmres

        def one(k: int) -> np.ndarray:
            x, info = method(self.matrix, rhs[:, k], rtol=self.tol, maxiter=self.maxiter, M=precond)
            if info != 0:
                # fall back to the sparse LU factorization
                self.fallbacks += 1
                return self._direct(rhs[:, k])
            return x

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(one, active))
        else:
            results = [one(k) for k in active]
        for k, x in zip(active, results):
            out[:, k] = x
        return out


@dataclass
class NodeProblem:
    """Data of one node-layer order, possibly differentiated dt_order times in t."""

    order: Order
    vertex: Dict[int, TimeSignal]
    psi: Dict[int, List[TimeSignal]]
    phi0: Optional[Expression]
    prev: Optional["NodeField"]
    dt_order: int = 0
    derivative_mode: str = "solve"

    def vertex_at(self, i: int, t: np.ndarray) -> np.ndarray:
        return self.vertex[i](t, derivative=self.dt_order)

    def psi_at(self, i: int, t: np.ndarray) -> List[np.ndarray]:
        return [c(t, derivative=self.dt_order) for c in self.psi.get(i, [])]

    def differentiated(self) -> "NodeProblem":
        return replace(self, dt_order=self.dt_order + 1)


@dataclass
class NodeField:
    """Time samples of N~ (or one of its time derivatives) on the node mesh."""

    problem: NodeProblem
    operator: NodeLayerOperator
    times: np.ndarray
    values: np.ndarray
    solvability_defect: float = 0.0
    decay_rates: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    decay_band: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    cap_ratio: float = 0.0
    derivative_mode: Optional[str] = None
    _derivatives: Dict[int, "NodeField"] = field(default_factory=dict, repr=False)

    @property
    def order(self) -> Order:
        return self.problem.order

    @property
    def dt_order(self) -> int:
        return self.problem.dt_order

    @property
    def mesh(self) -> VoxelMesh:
        return self.operator.mesh

    @property
    def min_decay_rate(self) -> float:
        """Smallest fitted decay rate over the stubs; NaN when no stub could be fitted."""
        rates = self.decay_rates[np.isfinite(self.decay_rates)]
        return float(rates.min()) if rates.size else float("nan")

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def integral(self) -> np.ndarray:
        """Volume integral of the field at every sample time."""
        return self.values @ self.mesh.volume

    def tilde(self, xi: np.ndarray, t: np.ndarray) -> np.ndarray:
        """N~ at rescaled points xi (n, 3): trilinear in space, linear between time samples."""
        xi = np.atleast_2d(xi)
        t = np.broadcast_to(np.asarray(t, dtype=float), (xi.shape[0],))
        if self.is_zero:
            return np.zeros(xi.shape[0])
        pos = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        frac = np.clip((t - self.times[pos]) / (self.times[pos + 1] - self.times[pos]), 0.0, 1.0)
        out = np.zeros(xi.shape[0])
        for shift, weight in ((0, 1.0 - frac), (1, frac)):
            for k in np.unique(pos + shift):
                sel = (pos + shift) == k
                out[sel] += weight[sel] * trilinear(self.mesh, self.values[k], xi[sel])
        return out

    def asymptote(self, i: int, xi_i: np.ndarray, t: np.ndarray, d_xi: int = 0) -> np.ndarray:
        """d^n/dxi^n of w_i(0, t) + Psi_i(xi_i, t) (with this field's time derivatives)."""
        xi_i = np.asarray(xi_i, dtype=float)
        t = np.asarray(t, dtype=float)
        total = self.problem.vertex_at(i, t) * (1.0 if d_xi == 0 else 0.0)
        for j, c in enumerate(self.problem.psi_at(i, t), start=1):
            if j - d_xi < 0:
                continue
            total = total + c * xi_i ** (j - d_xi) / math.factorial(j - d_xi)
        return np.asarray(total, dtype=float)

    def full(self, xi: np.ndarray, t: np.ndarray) -> np.ndarray:
        """N = sum_i (w_i(0) + Psi_i) chi(xi_i) + N~, with N~ = 0 beyond the truncation."""
        xi = np.atleast_2d(xi)
        t = np.broadcast_to(np.asarray(t, dtype=float), (xi.shape[0],))
        out = self.tilde(xi, t)
        for i in EDGES:
            ax = i - 1
            others = [a for a in range(3) if a != ax]
            in_stub = (xi[:, ax] > self.operator.ell0) & np.all(np.abs(xi[:, others]) <= self.operator.ell0, axis=1)
            if np.any(in_stub):
                chi = cutoff_chi_ell0(xi[in_stub, ax], self.operator.ell0)
                out[in_stub] += chi * self.asymptote(i, xi[in_stub, ax], t[in_stub])
        return out

    def derivative(self, mode: str = "solve") -> "NodeField":
        return time_derivative_field(self, mode)

    def slice_frame(self, sample: int = -1, axis: int = 2, value: float = 0.0) -> pd.DataFrame:
        """Layer of cells through xi_axis = value at one time sample (ASCII voxel dump)."""
        mesh = self.mesh
        layer = np.flatnonzero(mesh.ijk[:, axis] == int(np.floor(value / mesh.spacing)))
        centers = mesh.centers[layer]
        frame = pd.DataFrame({name: centers[:, a] for a, name in enumerate(("xi1", "xi2", "xi3")) if a != axis})
        frame["region"] = mesh.region[layer]
        frame["N_tilde"] = self.values[sample, layer]
        frame["N"] = self.full(centers, np.full(len(layer), self.times[sample]))
        return frame


def trilinear(mesh: VoxelMesh, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of cell values; missing corner cells are dropped and weights renormalized."""
    points = np.atleast_2d(points)
    coord = points / mesh.spacing - 0.5
    base = np.floor(coord).astype(np.int64)
    frac = coord - base
    total = np.zeros(len(points))
    wsum = np.zeros(len(points))
    for corner in range(8):
        offset = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(offset == 1, frac, 1.0 - frac), axis=1)
        cells = mesh.lookup(base + offset)
        ok = cells >= 0
        total[ok] += w[ok] * values[cells[ok]]
        wsum[ok] += w[ok]
    inside = mesh.locate(points) >= 0
    out = np.where(wsum > 1e-12, total / np.maximum(wsum, 1e-12), 0.0)
    return np.where(inside, out, 0.0)


def _sources(
    operator: NodeLayerOperator, problem: NodeProblem, times: np.ndarray, prev_dt: Optional[np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    """Right-hand sides (cells x samples) and the volume-integrated source per sample."""
    mesh = operator.mesh
    n_t = len(times)
    f = np.zeros((mesh.n_cells, n_t))
    for i in EDGES:
        cells = operator.stub_cells[i]
        vertex = problem.vertex_at(i, times)
        if np.any(vertex):
            f[cells] += np.outer(operator.stub_basis(i, 0), vertex)
        for j, c in enumerate(problem.psi_at(i, times), start=1):
            if np.any(c):
                f[cells] += np.outer(operator.stub_basis(i, j), c)
    if prev_dt is not None:
        f -= prev_dt.T
    rhs = f * mesh.volume[:, None]
    if problem.phi0 is not None and problem.order == FIRST_INTERACTION:
        phi = problem.phi0.diff("t", problem.dt_order)
        centers = mesh.bnd_centers[operator.node_faces]
        areas = mesh.bnd_area[operator.node_faces]
        cells = mesh.bnd_cell[operator.node_faces]
        for k, tk in enumerate(times):
            values = phi(xi1=centers[:, 0], xi2=centers[:, 1], xi3=centers[:, 2], t=tk)
            np.add.at(rhs[:, k], cells, -values * areas)
    initial = np.asarray(times) <= 0.0
    rhs[:, initial] = 0.0
    f[:, initial] = 0.0
    return rhs, f


def _prev_derivative(problem: NodeProblem) -> Optional[np.ndarray]:
    """d^(n+1)/dt^(n+1) of the previous order at the sample times, shape (samples, cells)."""
    if problem.prev is None:
        return None
    target = problem.prev
    for _ in range(problem.dt_order + 1):
        target = target.derivative(problem.derivative_mode)
    if target.is_zero:
        return None
    return target.values


def fit_decay(operator: NodeLayerOperator, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Decay rate per stub from log cross-section means over the middle third, and the cap ratio."""
    mesh = operator.mesh
    rates = np.full(3, np.nan)
    bands = np.full(3, np.nan)
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    cap_ratio = 0.0
    if peak == 0.0:
        return rates, bands, cap_ratio
    sample = int(np.argmax(np.max(np.abs(values), axis=1)))
    field_abs = np.abs(values[sample])
    for i in EDGES:
        cells = operator.stub_cells[i]
        length = mesh.lengths[i - 1]
        layer = mesh.ijk[cells, i - 1]
        layers, inverse = np.unique(layer, return_inverse=True)
        means = np.bincount(inverse, weights=field_abs[cells]) / np.bincount(inverse)
        centers = (layers + 0.5) * mesh.spacing
        lo = operator.ell0 + (length - operator.ell0) / 3.0
        hi = operator.ell0 + 2.0 * (length - operator.ell0) / 3.0
        sel = (centers >= lo) & (centers <= hi) & (means > 0)
        if np.count_nonzero(sel) >= 3:
            fit = stats.linregress(centers[sel], np.log(means[sel]))
            rates[i - 1] = -fit.slope
            bands[i - 1] = 1.96 * fit.stderr
        cap = mesh.bnd_cell[mesh.bnd_tag == TAG_CODE[f"cap_{i}"]]
        cap_ratio = max(cap_ratio, float(np.max(np.abs(values[:, cap]))) / peak)
    return rates, bands, cap_ratio


def _report_truncation(
    order: Order, rates: np.ndarray, cap_ratio: float, tol: float, on_truncation: str
) -> None:
    problems = [
        f"no decay along stub {i} (beta0 = {rates[i - 1]:.3g})" for i in EDGES if rates[i - 1] <= 0.0
    ]
    if cap_ratio > tol:
        problems.append(f"{cap_ratio:.2e} of the maximum left at the caps (limit {tol:g})")
    if not problems:
        return
    details = "; ".join(problems)
    message = f"node field of order {order.label()}: {details}; increase trunc_len"
    if on_truncation == "error":
        raise TruncationError(message)
    warnings.warn(message, TruncationWarning)


def solve_node_problem(
    operator: NodeLayerOperator,
    problem: NodeProblem,
    times: np.ndarray,
    solvability_tol: float = 1e-6,
    truncation_tol: float = 1e-4,
    check: bool = True,
    on_truncation: str = "warn",
) -> NodeField:
    """Steady solves of N~ at every sample time, with solvability and decay diagnostics.

    A field that does not decay along a stub (fitted rate <= 0) or that keeps more
    than truncation_tol of its maximum at the caps is reported as a
    TruncationWarning, or raised as TruncationError when on_truncation is "error".
    """
    prev_dt = _prev_derivative(problem)
    rhs, f = _sources(operator, problem, times, prev_dt)
    mesh = operator.mesh

    flux_in = rhs.sum(axis=0)
    scale = np.abs(f * mesh.volume[:, None]).sum(axis=0) + np.abs(rhs - f * mesh.volume[:, None]).sum(axis=0)
    # normalized by the largest sample scale
    peak = float(np.max(scale)) if scale.size else 0.0
    defect = float(np.max(np.abs(flux_in)) / peak) if peak > 0.0 else 0.0
    if check and problem.dt_order == 0 and defect > solvability_tol:
        raise SolvabilityDefect(
            f"node problem of order {problem.order.label()} violates solvability (relative defect {defect:.2e})",
            defect=defect,
        )

    values = operator.solve(rhs).T
    rates, bands, cap_ratio = fit_decay(operator, values)
    if check and problem.dt_order == 0:
        _report_truncation(problem.order, rates, cap_ratio, truncation_tol, on_truncation)
    return NodeField(
        problem=problem,
        operator=operator,
        times=np.asarray(times, dtype=float),
        values=values,
        solvability_defect=defect,
        decay_rates=rates,
        decay_band=bands,
        cap_ratio=cap_ratio,
        derivative_mode=None,
    )


def time_derivative_field(field_: NodeField, mode: str = "solve") -> NodeField:
    """d/dt of a node field, by re-solving with differentiated data or by finite differences."""
    n = field_.dt_order + 1
    if mode == "solve" and n in field_._derivatives:
        return field_._derivatives[n]
    if mode == "solve":
        problem = field_.problem.differentiated()
        result = solve_node_problem(field_.operator, problem, field_.times, check=False)
        result.derivative_mode = "solve"
        field_._derivatives[n] = result
        return result
    if len(field_.times) < 3:
        raise ValueError("finite-difference time derivatives need at least 3 samples")
    values = np.gradient(field_.values, field_.times, axis=0, edge_order=2)
    return NodeField(
        problem=field_.problem.differentiated(),
        operator=field_.operator,
        times=field_.times,
        values=values,
        derivative_mode="finite-difference",
    )


@dataclass
class GluingConstant:
    """Right-hand side d(t) of the Kirchhoff condition of one order."""

    order: Order
    t: np.ndarray
    values: np.ndarray
    components: Dict[str, np.ndarray]

    @property
    def signal(self) -> TimeSignal:
        return TimeSignal(self.t, self.values, clamped=True)


def compute_gluing_constant(
    order: Order,
    operator: Optional[NodeLayerOperator],
    t: np.ndarray,
    prev_field: Optional[NodeField],
    phi0: Optional[Expression],
    psi: Dict[int, List[TimeSignal]],
    derivative_mode: str = "solve",
) -> GluingConstant:
    """d = -(1/pi) int phi0 - (1/pi) int dN~_prev/dt + sum h_i^2 int (Psi' - v Psi) chi'."""
    t = np.asarray(t, dtype=float)
    zeros = np.zeros(len(t))
    if order.is_base or operator is None:
        return GluingConstant(order, t, zeros, {"node_interaction": zeros, "time_derivative": zeros, "stub": zeros})

    stub = np.zeros(len(t))
    for i in EDGES:
        for j, c in enumerate(psi.get(i, []), start=1):
            stub += operator.stub_integral(i, j) * c(t)

    interaction = np.zeros(len(t))
    if phi0 is not None and order == FIRST_INTERACTION and not phi0.is_zero:
        mesh = operator.mesh
        centers = mesh.bnd_centers[operator.node_faces]
        areas = mesh.bnd_area[operator.node_faces]
        for k, tk in enumerate(t):
            values = phi0(xi1=centers[:, 0], xi2=centers[:, 1], xi3=centers[:, 2], t=tk)
            interaction[k] = -float(np.sum(values * areas)) / np.pi

    time_part = np.zeros(len(t))
    if prev_field is not None and not prev_field.is_zero:
        dt_field = prev_field.derivative(derivative_mode)
        sampled = -dt_field.integral() / np.pi
        time_part = TimeSignal(dt_field.times, sampled, clamped=True)(t)

    return GluingConstant(
        order,
        t,
        stub + interaction + time_part,
        {"node_interaction": interaction, "time_derivative": time_part, "stub": stub},
    )


def sample_indices(n_time: int, n_samples: int) -> np.ndarray:
    """Indices of the node-layer time samples on an edge time grid with n_time points."""
    return np.unique(np.round(np.linspace(0, n_time - 1, n_samples)).astype(int))

