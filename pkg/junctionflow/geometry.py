"""Geometry of the thin junction, its limit graph and voxel discretizations."""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd
import sympy as sp

from junctionflow.errors import (
    ConfigError,
    GammaOutOfWindow,
    GeometryOverlap,
    SpacingTooCoarse,
    TruncationTooShort,
    WrongSign,
)
from junctionflow.expressions import _bump_ratio
from junctionflow.orders import check_alpha, gamma_window

EDGES = (1, 2, 3)
NODE_REGION = 0


@dataclass(frozen=True)
class NetworkSpec:
    """Geometric and physical parameters of the thin junction."""

    ell0: float = 0.3
    ell: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    h: Tuple[float, float, float] = (0.2, 0.2, 0.2)
    eps: float = 0.1
    alpha: float = 0.5
    gamma: float = 0.85
    T: float = 1.0
    node_shape: str = "cube"

    def length(self, i: int) -> float:
        return float(self.ell[i - 1])

    def radius(self, i: int) -> float:
        return float(self.h[i - 1])

    def with_eps(self, eps: float) -> "NetworkSpec":
        return NetworkSpec(self.ell0, self.ell, self.h, eps, self.alpha, self.gamma, self.T, self.node_shape)


def check_network(spec: NetworkSpec) -> None:
    """Raise the named error for the first violated geometric assumption."""
    if not 0.0 < spec.ell0 < 1.0 / 3.0:
        raise ConfigError(f"ell0 must lie in (0, 1/3), got {spec.ell0}")
    if any(length < 1.0 for length in spec.ell):
        raise ConfigError(f"edge lengths must be >= 1, got {spec.ell}")
    if any(r <= 0.0 for r in spec.h):
        raise ConfigError(f"radii must be positive, got {spec.h}")
    if spec.node_shape != "cube":
        raise ConfigError(f"unsupported node shape '{spec.node_shape}' (only 'cube')")
    _check_ports(spec)
    if spec.eps <= 0.0 or spec.T <= 0.0:
        raise ConfigError("eps and T must be positive")
    try:
        check_alpha(spec.alpha)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    lower, upper = gamma_window(spec.alpha)
    if not lower < spec.gamma < upper:
        raise GammaOutOfWindow(
            f"gamma = {spec.gamma} outside the admissible window ({lower:.4f}, {upper:.4f})"
        )


def _check_ports(spec: NetworkSpec) -> None:
    for i in EDGES:
        if spec.radius(i) >= spec.ell0:
            raise GeometryOverlap(
                f"port {i} of radius {spec.radius(i)} does not fit on a node face of half-size {spec.ell0}"
            )


# ---------------------------------------------------------------- voxel meshes

BOUNDARY_TAGS: Tuple[str, ...] = (
    "node",
    "lateral_1",
    "lateral_2",
    "lateral_3",
    "base_1",
    "base_2",
    "base_3",
    "cap_1",
    "cap_2",
    "cap_3",
)
TAG_CODE: Dict[str, int] = {name: code for code, name in enumerate(BOUNDARY_TAGS)}


def transverse_axes(i: int) -> Tuple[int, int]:
    """Axes (0-based) of the transverse coordinates of cylinder i, in increasing order."""
    return tuple(a for a in range(3) if a != i - 1)  # type: ignore[return-value]


@dataclass
class VoxelMesh:
    """Uniform voxel discretization of the junction or of the rescaled node domain.

    Coordinates are in mesh units: physical x for the thin junction (scale = eps),
    rescaled xi for the node domain (scale = 1). Cylinder cells and their faces
    are scaled by kappa_i so that cross-sections have the exact disk area.
    """

    kind: str
    spacing: float
    scale: float
    half_size: float
    radii: np.ndarray
    lengths: np.ndarray
    ijk: np.ndarray
    region: np.ndarray
    volume: np.ndarray
    kappa: np.ndarray
    face_a: np.ndarray
    face_b: np.ndarray
    face_axis: np.ndarray
    face_area: np.ndarray
    bnd_cell: np.ndarray
    bnd_axis: np.ndarray
    bnd_sign: np.ndarray
    bnd_area: np.ndarray
    bnd_tag: np.ndarray
    _keys: np.ndarray = field(repr=False)
    _order: np.ndarray = field(repr=False)
    _offset: int = field(repr=False)
    _width: int = field(repr=False)

    @property
    def n_cells(self) -> int:
        return int(self.ijk.shape[0])

    @property
    def centers(self) -> np.ndarray:
        return (self.ijk + 0.5) * self.spacing

    @property
    def face_centers(self) -> np.ndarray:
        centers = self.centers[self.face_a].copy()
        centers[np.arange(len(self.face_a)), self.face_axis] += 0.5 * self.spacing
        return centers

    @property
    def bnd_centers(self) -> np.ndarray:
        centers = self.centers[self.bnd_cell].copy()
        centers[np.arange(len(self.bnd_cell)), self.bnd_axis] += 0.5 * self.spacing * self.bnd_sign
        return centers

    @property
    def boundary_patches(self) -> Dict[str, np.ndarray]:
        """Boundary face indices grouped by tag."""
        return {
            name: np.flatnonzero(self.bnd_tag == code)
            for name, code in TAG_CODE.items()
            if np.any(self.bnd_tag == code)
        }

    def patch_area(self, name: str) -> float:
        return float(self.bnd_area[self.bnd_tag == TAG_CODE[name]].sum())

    def cells_in(self, region: int) -> np.ndarray:
        return np.flatnonzero(self.region == region)

    def lookup(self, ijk: np.ndarray) -> np.ndarray:
        """Cell index for lattice indices, -1 where no cell exists."""
        keys = _encode(np.atleast_2d(ijk), self._offset, self._width)
        pos = np.searchsorted(self._keys, keys)
        pos = np.clip(pos, 0, len(self._keys) - 1)
        found = self._keys[pos] == keys
        return np.where(found, self._order[pos], -1)

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Cell index containing each point, -1 outside."""
        ijk = np.floor(np.atleast_2d(points) / self.spacing).astype(np.int64)
        return self.lookup(ijk)

    def total_volume(self) -> float:
        return float(self.volume.sum())

    def to_frame(self) -> pd.DataFrame:
        """Cell table for an ASCII voxel dump."""
        centers = self.centers
        return pd.DataFrame(
            {
                "i": self.ijk[:, 0],
                "j": self.ijk[:, 1],
                "k": self.ijk[:, 2],
                "x": centers[:, 0],
                "y": centers[:, 1],
                "z": centers[:, 2],
                "region": self.region,
                "volume": self.volume,
            }
        )


def _encode(ijk: np.ndarray, offset: int, width: int) -> np.ndarray:
    shifted = ijk.astype(np.int64) + offset
    return (shifted[:, 0] * width + shifted[:, 1]) * width + shifted[:, 2]


def _snap_spacing(half_size: float, spacing: float) -> Tuple[float, int]:
    n_half = max(1, int(np.ceil(half_size / spacing - 1e-9)))
    return half_size / n_half, n_half


def _cross_section(radius: float, spacing: float, n_half: int) -> np.ndarray:
    j = np.arange(-n_half, n_half)
    jj, kk = np.meshgrid(j, j, indexing="ij")
    centers = (np.stack([jj.ravel(), kk.ravel()], axis=1) + 0.5) * spacing
    inside = np.hypot(centers[:, 0], centers[:, 1]) < radius
    return np.stack([jj.ravel()[inside], kk.ravel()[inside]], axis=1)


def _voxelize(
    kind: str,
    half_size: float,
    radii: Sequence[float],
    lengths: Sequence[float],
    spacing: float,
    scale: float,
    end_tag: str,
) -> VoxelMesh:
    spacing, n_half = _snap_spacing(half_size, spacing)
    s = spacing

    j = np.arange(-n_half, n_half)
    cube = np.stack(np.meshgrid(j, j, j, indexing="ij"), axis=-1).reshape(-1, 3)
    blocks = [cube]
    regions = [np.zeros(len(cube), dtype=np.int8)]
    volumes = [np.full(len(cube), s**3)]
    kappa = np.ones(3)
    n_cross = np.zeros(3, dtype=int)
    for i in EDGES:
        cross = _cross_section(radii[i - 1], s, n_half)
        n_cross[i - 1] = len(cross)
        kappa[i - 1] = np.pi * radii[i - 1] ** 2 / (len(cross) * s**2)
        n_end = int(round(lengths[i - 1] / s))
        axial = np.arange(n_half, n_end)
        ax_idx, cr_idx = np.meshgrid(axial, np.arange(len(cross)), indexing="ij")
        cells = np.zeros((ax_idx.size, 3), dtype=np.int64)
        a, b = transverse_axes(i)
        cells[:, i - 1] = ax_idx.ravel()
        cells[:, a] = cross[cr_idx.ravel(), 0]
        cells[:, b] = cross[cr_idx.ravel(), 1]
        blocks.append(cells)
        regions.append(np.full(len(cells), i, dtype=np.int8))
        volumes.append(np.full(len(cells), kappa[i - 1] * s**3))

    ijk = np.concatenate(blocks).astype(np.int64)
    region = np.concatenate(regions)
    volume = np.concatenate(volumes)

    offset = int(np.abs(ijk).max()) + 2
    width = 2 * offset + 1
    keys = _encode(ijk, offset, width)
    order = np.argsort(keys)
    sorted_keys = keys[order]

    def neighbour(direction: np.ndarray) -> np.ndarray:
        nb_keys = _encode(ijk + direction, offset, width)
        pos = np.clip(np.searchsorted(sorted_keys, nb_keys), 0, len(sorted_keys) - 1)
        return np.where(sorted_keys[pos] == nb_keys, order[pos], -1)

    cell_kappa = np.where(region > 0, kappa[np.maximum(region, 1) - 1], 1.0)
    face_a: List[np.ndarray] = []
    face_b: List[np.ndarray] = []
    face_axis: List[np.ndarray] = []
    face_area: List[np.ndarray] = []
    bnd_cell: List[np.ndarray] = []
    bnd_axis: List[np.ndarray] = []
    bnd_sign: List[np.ndarray] = []
    bnd_area: List[np.ndarray] = []
    bnd_tag: List[np.ndarray] = []
    centers = (ijk + 0.5) * s
    for axis in range(3):
        for sign in (1, -1):
            direction = np.zeros(3, dtype=np.int64)
            direction[axis] = sign
            nb = neighbour(direction)
            has = nb >= 0
            if sign == 1:
                idx = np.flatnonzero(has)
                face_a.append(idx)
                face_b.append(nb[idx])
                face_axis.append(np.full(len(idx), axis))
                k = np.where(region[idx] > 0, cell_kappa[idx], cell_kappa[nb[idx]])
                face_area.append(k * s**2)
            idx = np.flatnonzero(~has)
            reg = region[idx]
            tags = np.full(len(idx), TAG_CODE["node"])
            area = np.full(len(idx), s**2)
            for i in EDGES:
                in_cyl = reg == i
                if not np.any(in_cyl):
                    continue
                if axis == i - 1:
                    tags[in_cyl] = TAG_CODE[f"{end_tag}_{i}"]
                    area[in_cyl] = kappa[i - 1] * s**2
                else:
                    tags[in_cyl] = TAG_CODE[f"lateral_{i}"]
                    a, b = transverse_axes(i)
                    fc = centers[idx[in_cyl]].copy()
                    fc[:, axis] += 0.5 * s * sign
                    rr = np.hypot(fc[:, a], fc[:, b])
                    nu_a = np.abs(fc[:, a]) / rr
                    nu_b = np.abs(fc[:, b]) / rr
                    area[in_cyl] = s**2 / (nu_a + nu_b)
            if sign == 1:
                i = axis + 1
                on_port_plane = (reg == NODE_REGION) & (ijk[idx, axis] == n_half - 1)
                face_total = (2 * half_size) ** 2
                weight = (face_total - np.pi * radii[i - 1] ** 2) / (face_total - n_cross[i - 1] * s**2)
                area[on_port_plane] *= weight
            bnd_cell.append(idx)
            bnd_axis.append(np.full(len(idx), axis))
            bnd_sign.append(np.full(len(idx), sign))
            bnd_area.append(area)
            bnd_tag.append(tags)

    return VoxelMesh(
        kind=kind,
        spacing=s,
        scale=scale,
        half_size=half_size,
        radii=np.asarray(radii, dtype=float),
        lengths=np.array([int(round(length / s)) * s for length in lengths]),
        ijk=ijk,
        region=region,
        volume=volume,
        kappa=kappa,
        face_a=np.concatenate(face_a),
        face_b=np.concatenate(face_b),
        face_axis=np.concatenate(face_axis),
        face_area=np.concatenate(face_area),
        bnd_cell=np.concatenate(bnd_cell),
        bnd_axis=np.concatenate(bnd_axis),
        bnd_sign=np.concatenate(bnd_sign),
        bnd_area=np.concatenate(bnd_area),
        bnd_tag=np.concatenate(bnd_tag),
        _keys=sorted_keys,
        _order=order,
        _offset=offset,
        _width=width,
    )


def build_thin_junction(spec: NetworkSpec, spacing: float) -> VoxelMesh:
    """Voxelize the node cube and the three thin cylinders of the junction."""
    limit = spec.eps * min(spec.h) / 4.0
    if spacing > limit * (1 + 1e-12):
        raise SpacingTooCoarse(f"spacing {spacing} exceeds eps*min(h)/4 = {limit}")
    _check_ports(spec)
    return _voxelize(
        kind="thin",
        half_size=spec.eps * spec.ell0,
        radii=[spec.eps * r for r in spec.h],
        lengths=list(spec.ell),
        spacing=spacing,
        scale=spec.eps,
        end_tag="base",
    )


def build_rescaled_node(spec: NetworkSpec, trunc_len: float, spacing: float) -> VoxelMesh:
    """Voxelize the rescaled node with cylinder stubs truncated at trunc_len."""
    if trunc_len < 5.0 * spec.ell0 * (1 - 1e-12):
        raise TruncationTooShort(f"trunc_len {trunc_len} is below 5*ell0 = {5 * spec.ell0}")
    _check_ports(spec)
    return _voxelize(
        kind="node",
        half_size=spec.ell0,
        radii=list(spec.h),
        lengths=[trunc_len] * 3,
        spacing=spacing,
        scale=1.0,
        end_tag="cap",
    )


def analytic_volume(mesh: VoxelMesh) -> float:
    a = mesh.half_size
    cyl = sum(np.pi * mesh.radii[i - 1] ** 2 * (mesh.lengths[i - 1] - a) for i in EDGES)
    return 8 * a**3 + float(cyl)


def analytic_node_surface_area(mesh: VoxelMesh) -> float:
    a = mesh.half_size
    return 24 * a**2 - float(np.sum(np.pi * mesh.radii**2))


# ---------------------------------------------------------------- cut-off functions


@lru_cache(maxsize=None)
def _ramp_derivative(n: int) -> Callable[[np.ndarray], np.ndarray]:
    z = sp.Symbol("z", real=True)
    return sp.lambdify(z, sp.diff(_bump_ratio(z), z, n), modules="numpy")


def smooth_ramp(s: np.ndarray, a: float, b: float, derivative: int = 0) -> np.ndarray:
    """C-infinity monotone ramp from 0 (s <= a) to 1 (s >= b) and its derivatives."""
    s = np.asarray(s, dtype=float)
    width = b - a
    z = (s - a) / width
    out = np.zeros_like(z)
    if derivative == 0:
        out[z >= 1.0] = 1.0
    inside = (z > 0.0) & (z < 1.0)
    if np.any(inside):
        with np.errstate(all="ignore"):
            values = _ramp_derivative(derivative)(z[inside]) / width**derivative
        out[inside] = np.nan_to_num(values, nan=0.0, posinf=0.0, neginf=0.0)
    return out


def cutoff_chi_ell0(s: np.ndarray, ell0: float, derivative: int = 0) -> np.ndarray:
    """Node cut-off: 0 for s <= 2 ell0, 1 for s >= 3 ell0."""
    return smooth_ramp(s, 2.0 * ell0, 3.0 * ell0, derivative)


def cutoff_chi_delta(
    spec: NetworkSpec, i: int, x_i: np.ndarray, delta: float, derivative: int = 0
) -> np.ndarray:
    """Base cut-off of edge i: 0 for x_i <= ell_i - 2 delta, 1 for x_i >= ell_i - delta."""
    length = spec.length(i)
    return smooth_ramp(x_i, length - 2.0 * delta, length - delta, derivative)


# ---------------------------------------------------------------- limit graph


def limit_graph(spec: NetworkSpec, speeds: Sequence[float]) -> nx.DiGraph:
    """Star graph oriented by the flow: edge 1 into the vertex, edges 2 and 3 out of it."""
    if not (speeds[0] < 0 < speeds[1] and speeds[2] > 0):
        raise WrongSign(f"edge speeds {tuple(speeds)} violate v1 < 0 < v2, v3")
    graph = nx.DiGraph()
    graph.add_node("vertex", kind="vertex")
    for i in EDGES:
        graph.add_node(f"base_{i}", kind="base", edge=i)
        attrs = dict(edge=i, length=spec.length(i), radius=spec.radius(i), speed=float(speeds[i - 1]))
        if speeds[i - 1] < 0:
            graph.add_edge(f"base_{i}", "vertex", **attrs)
        else:
            graph.add_edge("vertex", f"base_{i}", **attrs)
    return graph


def edge_solve_order(graph: nx.DiGraph) -> List[int]:
    """Edge indices in the order information flows through the graph."""
    rank = {node: pos for pos, node in enumerate(nx.topological_sort(graph))}
    edges = sorted(graph.edges(data=True), key=lambda e: (rank[e[0]], e[2]["edge"]))
    return [data["edge"] for _, _, data in edges]
