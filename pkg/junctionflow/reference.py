"""Finite-volume reference solver for the full problem on the voxelized thin junction.

The scheme is conservative: every interior face flux is added to one cell and
subtracted from its neighbour, lateral and node faces carry the prescribed
total flux eps^alpha * phi * area, and the bases are Dirichlet faces.
"""

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator, bicgstab, spilu, splu

from junctionflow.edge_transport import BoundaryData
from junctionflow.errors import CFLAccuracyWarning, LinearSolveFailure, SpacingTooCoarse
from junctionflow.geometry import (
    EDGES,
    TAG_CODE,
    NetworkSpec,
    VoxelMesh,
    analytic_node_surface_area,
    build_thin_junction,
    transverse_axes,
)
from junctionflow.node_layer import trilinear
from junctionflow.utils import console, make_progress
from junctionflow.velocity import VelocityField, solve_node_potential


@dataclass
class ReferenceSolution:
    """Cell values of the reference solution at the stored times, with per-step diagnostics."""

    mesh: VoxelMesh
    spec: NetworkSpec
    times: np.ndarray
    values: np.ndarray
    ledger: pd.DataFrame
    min_value: float
    surface_area_defect: float
    temporal_error_estimate: float
    scheme: str = "euler"

    @property
    def max_ledger_defect(self) -> float:
        return float(self.ledger["relative_defect"].max()) if len(self.ledger) else 0.0

    def at(self, points: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Trilinear in space, linear in time between stored steps."""
        points = np.atleast_2d(points)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(points),))
        pos = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        frac = np.clip((t - self.times[pos]) / (self.times[pos + 1] - self.times[pos]), 0.0, 1.0)
        out = np.zeros(len(points))
        for shift, weight in ((0, 1.0 - frac), (1, frac)):
            for k in np.unique(pos + shift):
                sel = (pos + shift) == k
                out[sel] += weight[sel] * trilinear(self.mesh, self.values[k], points[sel])
        return out

    def snapshot_frame(self, step: int) -> pd.DataFrame:
        centers = self.mesh.centers
        return pd.DataFrame(
            {
                "x": centers[:, 0],
                "y": centers[:, 1],
                "z": centers[:, 2],
                "region": self.mesh.region,
                "t": self.times[step],
                "u": self.values[step],
            }
        )

    def point_series(self, points: np.ndarray) -> pd.DataFrame:
        """Time series at fixed points, one column per point."""
        points = np.atleast_2d(points)
        cells = self.mesh.locate(points)
        data = {"t": self.times}
        for k, cell in enumerate(cells):
            data[f"p{k}"] = self.values[:, cell] if cell >= 0 else np.full(len(self.times), np.nan)
        return pd.DataFrame(data)


def reference_mesh(spec: NetworkSpec, cells_per_radius: int = 6) -> VoxelMesh:
    """Voxel mesh of the thin junction with the requested resolution of the thinnest radius."""
    if cells_per_radius < 6:
        raise SpacingTooCoarse(f"the reference solver needs >= 6 cells across a radius, got {cells_per_radius}")
    return build_thin_junction(spec, spec.eps * min(spec.h) / cells_per_radius)


@dataclass
class _Operator:
    """Time-independent pieces of the discrete operator."""

    low: sps.csr_matrix
    limited_faces: np.ndarray
    upwind: np.ndarray
    downwind: np.ndarray
    far: np.ndarray
    face_flux: np.ndarray
    dirichlet: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)


def _face_velocity(mesh: VoxelMesh, spec: NetworkSpec, velocity: VelocityField) -> np.ndarray:
    """Normal velocity (a -> b along +axis) on every interior face."""
    eps = spec.eps
    speeds = [e.const_near_node for e in velocity.edges]
    potential = solve_node_potential(mesh, speeds, spec)
    vel = potential.face_velocity.copy()
    ra, rb = mesh.region[mesh.face_a], mesh.region[mesh.face_b]
    centers = mesh.face_centers
    for i in EDGES:
        ax = i - 1
        ta, tb = transverse_axes(i)
        edge = velocity.edge(i)
        inside = (ra == i) & (rb == i)
        axial = inside & (mesh.face_axis == ax)
        vel[axial] = edge.axial(centers[axial, ax])
        if edge.has_transverse:
            for comp, axis in enumerate((ta, tb)):
                sel = inside & (mesh.face_axis == axis)
                c = centers[sel]
                vbar = edge.transverse(c[:, ax], c[:, ta] / eps, c[:, tb] / eps)
                vel[sel] = eps * vbar[:, comp]
    return vel


def _assemble(mesh: VoxelMesh, spec: NetworkSpec, velocity: VelocityField) -> _Operator:
    eps = spec.eps
    s = mesh.spacing
    n = mesh.n_cells
    a, b, area = mesh.face_a, mesh.face_b, mesh.face_area
    vel = _face_velocity(mesh, spec, velocity)
    flux = vel * area
    forward = flux >= 0
    up = np.where(forward, a, b)
    down = np.where(forward, b, a)

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    diff = eps * area / s
    for r, c, v in ((a, a, diff), (a, b, -diff), (b, b, diff), (b, a, -diff), (a, up, flux), (b, up, -flux)):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    dirichlet: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for i in EDGES:
        faces = np.flatnonzero(mesh.bnd_tag == TAG_CODE[f"base_{i}"])
        cells = mesh.bnd_cell[faces]
        face_area = mesh.bnd_area[faces]
        v_end = float(velocity.edge(i).axial(np.array([spec.length(i)]))[0])
        conduct = eps * face_area / (0.5 * s)
        diag = conduct + (v_end * face_area if v_end > 0 else 0.0)
        rows.append(cells)
        cols.append(cells)
        vals.append(diag)
        dirichlet[i] = (cells, conduct, np.full(len(faces), v_end) * face_area)

    low = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    low.sum_duplicates()

    # second-order candidates: axial faces inside one cylinder with a cell two steps upwind
    same_cyl = (mesh.region[a] == mesh.region[b]) & (mesh.region[a] > 0)
    axial = same_cyl & (mesh.face_axis == mesh.region[a].astype(int) - 1)
    step = np.zeros((len(a), 3), dtype=np.int64)
    step[np.arange(len(a)), mesh.face_axis] = np.where(forward, -1, 1)
    far = mesh.lookup(mesh.ijk[up] + step)
    limited = np.flatnonzero(axial & (far >= 0))
    limited = limited[mesh.region[far[limited]] == mesh.region[a[limited]]]
    return _Operator(low, limited, up, down, far, flux, dirichlet)


def _limiter_matrix(op: _Operator, mesh: VoxelMesh, u: np.ndarray) -> sps.csr_matrix:
    """Minmod correction F * psi/2 * (u_up - u_far), with psi frozen from the previous level."""
    f = op.limited_faces
    up, down, far = op.upwind[f], op.downwind[f], op.far[f]
    num = u[down] - u[up]
    den = u[up] - u[far]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(np.abs(den) > 1e-300, num / den, 0.0)
    psi = np.clip(r, 0.0, 1.0)
    coef = 0.5 * psi * op.face_flux[f]
    a, b = mesh.face_a[f], mesh.face_b[f]
    rows = np.concatenate([a, a, b, b])
    cols = np.concatenate([up, far, up, far])
    vals = np.concatenate([coef, -coef, -coef, coef])
    return sps.csr_matrix((vals, (rows, cols)), shape=(mesh.n_cells, mesh.n_cells))


def _robin_sources(mesh: VoxelMesh, spec: NetworkSpec, data: BoundaryData):
    """Callable t -> prescribed outward flux per boundary face (lateral and node faces)."""
    eps = spec.eps
    centers = mesh.bnd_centers
    groups = []
    node = np.flatnonzero(mesh.bnd_tag == TAG_CODE["node"])
    if not data.phi0.is_zero and len(node):
        xi = centers[node] / eps
        groups.append((node, lambda t, xi=xi: data.phi0(xi1=xi[:, 0], xi2=xi[:, 1], xi3=xi[:, 2], t=t)))
    for i in EDGES:
        faces = np.flatnonzero(mesh.bnd_tag == TAG_CODE[f"lateral_{i}"])
        if data.phi[i - 1].is_zero or not len(faces):
            continue
        ta, tb = transverse_axes(i)
        c = centers[faces]
        theta = np.arctan2(c[:, tb], c[:, ta])
        x_i = c[:, i - 1]
        groups.append((faces, lambda t, th=theta, x=x_i, e=data.phi[i - 1]: e(theta=th, x=x, t=t)))

    def flux(t: float) -> np.ndarray:
        out = np.zeros(len(mesh.bnd_cell))
        for faces, func in groups:
            out[faces] = eps**spec.alpha * func(t) * mesh.bnd_area[faces]
        return out

    return flux


def solve_reference(
    spec: NetworkSpec,
    data: BoundaryData,
    mesh: VoxelMesh,
    dt: float,
    velocity: VelocityField,
    scheme: str = "euler",
    limiter: bool = True,
    store_every: int = 1,
    tol: float = 1e-12,
    accuracy_target: float = 5e-2,
    verbose: bool = False,
) -> ReferenceSolution:
    """Implicit time stepping of du/dt - eps Lap u + div(V u) = 0 with zero initial value."""
    if scheme not in ("euler", "bdf2"):
        raise ValueError(f"unknown scheme '{scheme}'")
    n_steps = max(1, int(round(spec.T / dt)))
    dt = spec.T / n_steps
    op = _assemble(mesh, spec, velocity)
    robin = _robin_sources(mesh, spec, data)
    vol = mesh.volume
    n = mesh.n_cells

    factor_cache: Dict[float, object] = {}

    def system(c0: float, u_lag: np.ndarray) -> Tuple[sps.csr_matrix, object]:
        base = (sps.diags(c0 * vol / dt) + op.low).tocsr()
        if c0 not in factor_cache:
            if not limiter or not len(op.limited_faces):
                factor_cache[c0] = splu(base.tocsc())
            else:
                factor_cache[c0] = spilu(base.tocsc(), drop_tol=1e-6, fill_factor=20)
        if limiter and len(op.limited_faces):
            return (base + _limiter_matrix(op, mesh, u_lag)).tocsr(), factor_cache[c0]
        return base, factor_cache[c0]

    def solve(matrix: sps.csr_matrix, factor: object, rhs: np.ndarray, guess: np.ndarray) -> np.ndarray:
        if not limiter or not len(op.limited_faces):
            x = factor.solve(rhs)  # type: ignore[attr-defined]
        else:
            precond = LinearOperator((n, n), matvec=factor.solve)  # type: ignore[attr-defined]
            x, info = bicgstab(matrix, rhs, x0=guess, rtol=tol, maxiter=2000, M=precond)
            if info != 0:
                raise LinearSolveFailure(f"reference step did not converge (info={info})")
        if not np.all(np.isfinite(x)):
            raise LinearSolveFailure("reference step produced non-finite values")
        return x

    u_prev = np.zeros(n)
    u = np.zeros(n)
    times = [0.0]
    stored = [u.copy()]
    ledger: List[Dict[str, float]] = []
    second_diff = 0.0
    peak = 0.0

    with make_progress(disable=not verbose) as progress:
        task = progress.add_task("🧮 Reference time steps...", total=n_steps)
        for step in range(1, n_steps + 1):
            t_new = step * dt
            bnd = robin(t_new)
            rhs_b = -np.bincount(mesh.bnd_cell, weights=bnd, minlength=n)
            q_flux_terms = []
            for i, (cells, conduct, adv) in op.dirichlet.items():
                q = float(data.q[i - 1](t=t_new))
                inflow = np.where(adv < 0, -adv * q, 0.0)
                np.add.at(rhs_b, cells, conduct * q + inflow)
                q_flux_terms.append((cells, conduct, adv, q))

            if scheme == "bdf2" and step > 1:
                c0 = 1.5
                history = vol * (2.0 * u - 0.5 * u_prev) / dt
                lag = 2.0 * u - u_prev
            else:
                c0 = 1.0
                history = vol * u / dt
                lag = u
            matrix, factor = system(c0, lag)
            u_new = solve(matrix, factor, history + rhs_b, lag)

            # ledger: storage change against boundary fluxes
            if c0 == 1.5:
                storage = float(np.sum(vol * (1.5 * u_new - 2.0 * u + 0.5 * u_prev)) / dt)
            else:
                storage = float(np.sum(vol * (u_new - u)) / dt)
            robin_total = float(bnd.sum())
            dirichlet_total = 0.0
            for cells, conduct, adv, q in q_flux_terms:
                dirichlet_total += float(np.sum(conduct * (u_new[cells] - q)))
                dirichlet_total += float(np.sum(np.where(adv > 0, adv * u_new[cells], adv * q)))
            defect = storage + robin_total + dirichlet_total
            scale = max(abs(storage), abs(robin_total), abs(dirichlet_total), 1e-300)
            ledger.append(
                {
                    "step": step,
                    "t": t_new,
                    "storage_rate": storage,
                    "robin_flux": robin_total,
                    "dirichlet_flux": dirichlet_total,
                    "defect": defect,
                    "relative_defect": abs(defect) / scale if scale > 1e-300 else 0.0,
                }
            )
            if step > 1:
                second_diff = max(second_diff, float(np.max(np.abs(u_new - 2.0 * u + u_prev))))
            peak = max(peak, float(np.max(np.abs(u_new))))
            u_prev, u = u, u_new
            if step % store_every == 0 or step == n_steps:
                times.append(t_new)
                stored.append(u.copy())
            progress.advance(task)

    estimate = 0.5 * second_diff / peak if peak > 0 else 0.0
    if estimate > accuracy_target:
        message = f"time step {dt:.3g} gives an estimated relative temporal error {estimate:.2e}"
        warnings.warn(message, CFLAccuracyWarning)
        if verbose:
            console.print(f"⚠️ {message}")

    values = np.array(stored)
    node_area = float(mesh.bnd_area[mesh.bnd_tag == TAG_CODE["node"]].sum())
    exact = analytic_node_surface_area(mesh)
    return ReferenceSolution(
        mesh=mesh,
        spec=spec,
        times=np.array(times),
        values=values,
        ledger=pd.DataFrame(ledger),
        min_value=float(values.min()),
        surface_area_defect=abs(node_area - exact) / exact,
        temporal_error_estimate=estimate,
        scheme=scheme,
    )


def solve_reference_from_config(
    spec: NetworkSpec,
    data: BoundaryData,
    velocity: VelocityField,
    cells_per_radius: int = 6,
    dt: float = 0.01,
    scheme: str = "euler",
    limiter: bool = True,
    verbose: bool = False,
) -> ReferenceSolution:
    mesh = reference_mesh(spec, cells_per_radius)
    if verbose:
        console.print(f"📐 Reference mesh: {mesh.n_cells} cells, spacing {mesh.spacing:.3e}")
    return solve_reference(spec, data, mesh, dt, velocity, scheme=scheme, limiter=limiter, verbose=verbose)
