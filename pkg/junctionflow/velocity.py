"""Convective field of the junction: edge velocities and the node potential."""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator, cg

from junctionflow.errors import ConservationViolated, OutOfRegion, SolverDiverged
from junctionflow.expressions import Expression
from junctionflow.geometry import EDGES, NODE_REGION, NetworkSpec, VoxelMesh, transverse_axes


@dataclass
class EdgeVelocity:
    """Axial and transverse velocity on one edge."""

    edge: int
    v_axial: Expression
    v_transverse: Tuple[Expression, Expression]
    const_near_node: float
    node_support: float

    @classmethod
    def constant(cls, edge: int, speed: float, node_support: float = 0.1) -> "EdgeVelocity":
        zero = Expression("0", ("x", "y1", "y2"))
        return cls(edge, Expression(repr(float(speed)), ("x",)), (zero, zero), float(speed), node_support)

    def axial(self, x: np.ndarray) -> np.ndarray:
        return self.v_axial(x=x)

    def axial_derivative(self, x: np.ndarray, n: int = 1) -> np.ndarray:
        return self.v_axial.diff("x", n)(x=x)

    def transverse(self, x: np.ndarray, y1: np.ndarray, y2: np.ndarray) -> np.ndarray:
        """V-bar at (x, y); trailing axis holds the two components."""
        return np.stack(
            [self.v_transverse[0](x=x, y1=y1, y2=y2), self.v_transverse[1](x=x, y1=y1, y2=y2)],
            axis=-1,
        )

    @property
    def has_transverse(self) -> bool:
        return not (self.v_transverse[0].is_zero and self.v_transverse[1].is_zero)


@dataclass
class NodePotential:
    """Zero-mean potential on the node cube and its face velocities."""

    p: np.ndarray
    cells: np.ndarray
    face_velocity: np.ndarray
    residual: float
    iterations: int

    def to_frame(self, mesh: VoxelMesh) -> pd.DataFrame:
        """Potential on the node cells as an ASCII voxel dump."""
        frame = mesh.to_frame().iloc[self.cells].drop(columns=["region"]).reset_index(drop=True)
        frame["p"] = self.p
        return frame


@dataclass
class VelocityField:
    """The full convective field: three edge velocities plus the node potential."""

    spec: NetworkSpec
    edges: Tuple[EdgeVelocity, EdgeVelocity, EdgeVelocity]
    potential: Optional[NodePotential] = None
    mesh: Optional[VoxelMesh] = None

    @property
    def node_speeds(self) -> Tuple[float, float, float]:
        return tuple(e.const_near_node for e in self.edges)  # type: ignore[return-value]

    def edge(self, i: int) -> EdgeVelocity:
        return self.edges[i - 1]


def check_conservation(spec: NetworkSpec, v: Sequence[float]) -> None:
    """Raise ConservationViolated unless sum h_i^2 v_i vanishes."""
    weights = np.asarray(spec.h, dtype=float) ** 2
    terms = weights * np.asarray(v, dtype=float)
    defect = float(terms.sum())
    scale = max(float(np.abs(terms).max()), 1e-300)
    if abs(defect) > 1e-12 * scale and abs(defect) > 0.0:
        raise ConservationViolated(f"sum h_i^2 v_i = {defect:.3e} is not zero", defect=defect)


def _node_laplacian(mesh: VoxelMesh) -> Tuple[sps.csr_matrix, np.ndarray, np.ndarray]:
    """Positive semi-definite Neumann Laplacian on node cells (face flux form)."""
    cells = mesh.cells_in(NODE_REGION)
    local = np.full(mesh.n_cells, -1)
    local[cells] = np.arange(len(cells))
    a = local[mesh.face_a]
    b = local[mesh.face_b]
    interior = (a >= 0) & (b >= 0)
    dist = mesh.spacing / mesh.scale
    area = mesh.face_area[interior] / mesh.scale**2
    coef = area / dist
    ia, ib = a[interior], b[interior]
    n = len(cells)
    rows = np.concatenate([ia, ib, ia, ib])
    cols = np.concatenate([ia, ib, ib, ia])
    vals = np.concatenate([coef, coef, -coef, -coef])
    K = sps.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return K, cells, np.flatnonzero(interior)


def _port_faces(mesh: VoxelMesh) -> Tuple[np.ndarray, np.ndarray]:
    """Faces between node cells and cylinder cells, with the cylinder index."""
    ra = mesh.region[mesh.face_a]
    rb = mesh.region[mesh.face_b]
    port = (ra == NODE_REGION) & (rb > 0)
    return np.flatnonzero(port), rb[port].astype(int)


def solve_node_potential(
    mesh: VoxelMesh,
    v: Sequence[float],
    spec: Optional[NetworkSpec] = None,
    tol: float = 1e-10,
    maxiter: int = 20000,
) -> NodePotential:
    """Neumann Laplace problem on the node with port fluxes v_i, zero-mean normalized."""
    if spec is not None:
        check_conservation(spec, v)
    K, cells, interior_faces = _node_laplacian(mesh)
    local = np.full(mesh.n_cells, -1)
    local[cells] = np.arange(len(cells))

    ports, port_edge = _port_faces(mesh)
    rhs = np.zeros(len(cells))
    port_area = mesh.face_area[ports] / mesh.scale**2
    np.add.at(rhs, local[mesh.face_a[ports]], np.asarray(v, dtype=float)[port_edge - 1] * port_area)
    rhs -= rhs.mean()

    n = len(cells)
    if not np.any(rhs):
        p = np.zeros(n)
        iterations = 0
    else:
        diag = K.diagonal()
        precond = LinearOperator((n, n), matvec=lambda x: x / diag)
        counter = {"it": 0}

        def _count(_: np.ndarray) -> None:
            counter["it"] += 1

        p, info = cg(K, rhs, rtol=tol, maxiter=maxiter, M=precond, callback=_count)
        iterations = counter["it"]
        if info != 0:
            raise SolverDiverged(f"node potential CG did not converge (info={info})")
        p -= p.mean()

    residual = float(np.linalg.norm(K @ p - rhs) / max(np.linalg.norm(rhs), 1e-300)) if n else 0.0
    if np.any(rhs) and residual > 100 * tol:
        raise SolverDiverged(f"node potential residual {residual:.2e} above tolerance")

    face_velocity = np.zeros(len(mesh.face_a))
    dist = mesh.spacing / mesh.scale
    fa = interior_faces
    face_velocity[fa] = (p[local[mesh.face_b[fa]]] - p[local[mesh.face_a[fa]]]) / dist
    face_velocity[ports] = np.asarray(v, dtype=float)[port_edge - 1]
    return NodePotential(p=p, cells=cells, face_velocity=face_velocity, residual=residual, iterations=iterations)


def node_divergence(mesh: VoxelMesh, potential: NodePotential) -> np.ndarray:
    """Net outward flux of every node cell (zero up to solver tolerance)."""
    local = np.full(mesh.n_cells, -1)
    local[potential.cells] = np.arange(len(potential.cells))
    flux = potential.face_velocity * mesh.face_area / mesh.scale**2
    out = np.zeros(len(potential.cells))
    a = local[mesh.face_a]
    b = local[mesh.face_b]
    np.add.at(out, a[a >= 0], flux[a >= 0])
    np.add.at(out, b[b >= 0], -flux[b >= 0])
    return out


def eval_velocity(field: VelocityField, region: int, x: np.ndarray) -> np.ndarray:
    """Velocity vector at points x of the named region (0 = node, i = cylinder i)."""
    spec = field.spec
    x = np.atleast_2d(np.asarray(x, dtype=float))
    eps = spec.eps
    a = eps * spec.ell0
    out = np.zeros_like(x)
    if region == NODE_REGION:
        if np.any(np.abs(x) > a * (1 + 1e-12)):
            raise OutOfRegion("point outside the node cube")
        if field.potential is None or field.mesh is None or not np.any(field.potential.p):
            return out
        mesh = field.mesh
        scale = a / mesh.half_size
        cells = mesh.locate(np.clip(x / scale, -mesh.half_size * (1 - 1e-12), mesh.half_size * (1 - 1e-12)))
        # face-averaged gradient of the potential in each cell
        vel = np.zeros((mesh.n_cells, 3))
        weight = np.zeros((mesh.n_cells, 3))
        fv = field.potential.face_velocity
        for arr in (mesh.face_a, mesh.face_b):
            np.add.at(vel, (arr, mesh.face_axis), fv)
            np.add.at(weight, (arr, mesh.face_axis), 1.0)
        vel = np.where(weight > 0, vel / np.maximum(weight, 1), 0.0)
        return vel[cells]
    if region not in EDGES:
        raise OutOfRegion(f"unknown region {region}")
    i = region
    ax = i - 1
    ta, tb = transverse_axes(i)
    xi_axial = x[:, ax]
    radial = np.hypot(x[:, ta], x[:, tb])
    if np.any(xi_axial < a - 1e-12) or np.any(xi_axial > spec.length(i) + 1e-12) or np.any(
        radial > eps * spec.radius(i) * (1 + 1e-12)
    ):
        raise OutOfRegion(f"point outside cylinder {i}")
    ev = field.edge(i)
    out[:, ax] = ev.axial(xi_axial)
    if ev.has_transverse:
        vbar = ev.transverse(xi_axial, x[:, ta] / eps, x[:, tb] / eps)
        out[:, ta] = eps * vbar[:, 0]
        out[:, tb] = eps * vbar[:, 1]
    return out
