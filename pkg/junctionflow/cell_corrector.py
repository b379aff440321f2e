"""Neumann problems on the disk cross-section and the corrector fields they build.

The disk is discretized on a polar grid with cell-centred radii and uniform
angles. Each azimuthal Fourier mode is solved by a tridiagonal radial finite
volume system; the m = 0 mode carries the solvability condition and the
zero-mean normalization.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import solve_banded

from junctionflow.edge_transport import EdgeField
from junctionflow.errors import IncompatibleData
from junctionflow.expressions import Expression
from junctionflow.orders import BASE_FRACTIONAL, BASE_INTEGER, FIRST_INTERACTION, Order
from junctionflow.velocity import EdgeVelocity

DiskFunction = Union[np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]
CircleFunction = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class DiskGrid:
    """Polar grid of the disk of radius h."""

    radius: float
    n_r: int = 32
    n_theta: int = 64

    @property
    def dr(self) -> float:
        return self.radius / self.n_r

    @property
    def r(self) -> np.ndarray:
        return (np.arange(self.n_r) + 0.5) * self.dr

    @property
    def r_faces(self) -> np.ndarray:
        return np.arange(self.n_r + 1) * self.dr

    @property
    def theta(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta

    @property
    def weights(self) -> np.ndarray:
        """Cell areas, shape (n_r, n_theta)."""
        return np.outer(self.r * self.dr, np.full(self.n_theta, 2.0 * np.pi / self.n_theta))

    @property
    def area(self) -> float:
        return float(np.pi * self.radius**2)

    def mean(self, values: np.ndarray) -> float:
        return float(np.sum(values * self.weights) / self.weights.sum())

    def sample(self, func: DiskFunction) -> np.ndarray:
        if callable(func):
            rr, tt = np.meshgrid(self.r, self.theta, indexing="ij")
            return np.asarray(func(rr, tt), dtype=float) * np.ones_like(rr)
        return np.asarray(func, dtype=float)

    def sample_circle(self, func: CircleFunction) -> np.ndarray:
        if callable(func):
            return np.asarray(func(self.theta), dtype=float) * np.ones(self.n_theta)
        return np.asarray(func, dtype=float)


def _modes(values: np.ndarray) -> np.ndarray:
    return np.fft.rfft(values, axis=-1)


def _synthesize(modes: np.ndarray, n_theta: int) -> np.ndarray:
    return np.fft.irfft(modes, n=n_theta, axis=-1)


def solve_disk_neumann(
    rhs: DiskFunction,
    flux: CircleFunction,
    grid: DiskGrid,
    tol: float = 1e-9,
) -> np.ndarray:
    """Solve Laplace(u) = rhs in the disk, du/dnu = flux on the circle, zero mean.

    Returns the Fourier modes in theta of u on the radial cells, shape
    (n_r, n_theta // 2 + 1). Use disk_values() for grid values.
    """
    f = grid.sample(rhs)
    g = grid.sample_circle(flux)
    r, dr, h = grid.r, grid.dr, grid.radius
    F = _modes(f)
    G = _modes(g)
    n_modes = F.shape[1]

    weight_sum = float(np.sum(r * dr))
    volume_term = float(np.sum(r * F[:, 0].real) * dr)
    boundary_term = h * float(G[0].real)
    defect = 2.0 * np.pi * (volume_term - boundary_term) / grid.n_theta
    scale = 2.0 * np.pi * (float(np.sum(r * np.abs(f).mean(axis=1)) * dr) + h * float(np.abs(g).mean()))
    if abs(defect) > tol * max(1.0, scale):
        raise IncompatibleData(
            f"disk Neumann data incompatible: integral of source minus boundary flux = {defect:.3e}",
            defect=defect,
        )

    U = np.zeros((grid.n_r, n_modes), dtype=complex)
    # m = 0: integrate the radial flux directly, after removing the round-off defect
    f0 = F[:, 0].real - (volume_term - boundary_term) / weight_sum
    face_flux = np.cumsum(r * f0) * dr
    steps = dr * face_flux[:-1] / grid.r_faces[1:-1]
    u0 = np.concatenate([[0.0], np.cumsum(steps)])
    u0 -= np.sum(r * u0) * dr / weight_sum
    U[:, 0] = u0

    r_plus = grid.r_faces[1:]
    r_minus = grid.r_faces[:-1]
    for m in range(1, n_modes):
        ab = np.zeros((3, grid.n_r), dtype=complex)
        diag = -(r_minus + np.where(np.arange(grid.n_r) < grid.n_r - 1, r_plus, 0.0)) - m**2 * dr**2 / r
        ab[0, 1:] = r_plus[:-1]
        ab[1, :] = diag
        ab[2, :-1] = r_plus[:-1]
        b = r * dr**2 * F[:, m]
        b[-1] -= h * dr * G[m]
        if not np.any(b):
            continue
        U[:, m] = solve_banded((1, 1), ab, b)
    return U


def disk_values(modes: np.ndarray, grid: DiskGrid) -> np.ndarray:
    return _synthesize(modes, grid.n_theta)


def boundary_trace(modes: np.ndarray, grid: DiskGrid) -> np.ndarray:
    """Values at r = h by linear extrapolation from the last two radial cells."""
    edge_modes = 1.5 * modes[-1] - 0.5 * modes[-2]
    return _synthesize(edge_modes, grid.n_theta)


def evaluate_modes(modes: np.ndarray, grid: DiskGrid, r: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Point values from mode data: linear in r (with parity at the centre), exact in theta."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    n_modes = modes.shape[1]
    r_ext = np.concatenate([[0.0], grid.r, [grid.radius]])
    centre = np.zeros(n_modes, dtype=complex)
    centre[0] = modes[0, 0]
    edge = 1.5 * modes[-1] - 0.5 * modes[-2]
    ext = np.vstack([centre, modes, edge])
    pos = np.clip(np.searchsorted(r_ext, r, side="right") - 1, 0, len(r_ext) - 2)
    frac = (np.clip(r, 0.0, grid.radius) - r_ext[pos]) / (r_ext[pos + 1] - r_ext[pos])
    local = ext[pos] * (1.0 - frac)[..., None] + ext[pos + 1] * frac[..., None]
    m = np.arange(n_modes)
    factor = np.full(n_modes, 2.0)
    factor[0] = 1.0
    if grid.n_theta % 2 == 0:
        factor[-1] = 1.0
    phase = np.exp(1j * theta[..., None] * m)
    return np.real(np.sum(factor * local * phase, axis=-1)) / grid.n_theta


class CorrectorProblem:
    """Assembles the disk data of one corrector order on every (x, t) grid slice."""

    def __init__(
        self,
        edge: int,
        order: Order,
        grid: DiskGrid,
        x: np.ndarray,
        t: np.ndarray,
        velocity: EdgeVelocity,
        w_prev: Optional[EdgeField],
        u_prev: Optional["DiskField"],
        u_prev2: Optional["DiskField"],
        phi: Optional[Expression] = None,
    ):
        self.edge = edge
        self.order = order
        self.grid = grid
        self.x = np.asarray(x, dtype=float)
        self.t = np.asarray(t, dtype=float)
        self.velocity = velocity
        self.w_prev = None if w_prev is None or w_prev.is_zero else w_prev
        self.u_prev = None if u_prev is None or u_prev.is_zero else u_prev
        self.u_prev2 = None if u_prev2 is None or u_prev2.is_zero else u_prev2
        self.phi = None if phi is None or phi.is_zero else phi
        self._v = velocity.axial(self.x)
        self._faces = self._face_velocities() if velocity.has_transverse else None

    @property
    def is_trivial(self) -> bool:
        transverse = self._faces is not None and (self.w_prev is not None or self.u_prev is not None)
        return self.phi is None and self.u_prev is None and self.u_prev2 is None and not transverse

    def _face_velocities(self) -> Dict[str, np.ndarray]:
        """V-bar normal components on radial faces and angular faces for every x."""
        g = self.grid
        rf = g.r_faces[1:]
        th = g.theta
        th_half = th + np.pi / g.n_theta
        xs = self.x[:, None, None]
        rr, tt = np.meshgrid(rf, th, indexing="ij")
        vr = self.velocity.transverse(xs, rr * np.cos(tt), rr * np.sin(tt))
        radial = vr[..., 0] * np.cos(tt) + vr[..., 1] * np.sin(tt)
        rr, tt = np.meshgrid(g.r, th_half, indexing="ij")
        va = self.velocity.transverse(xs, rr * np.cos(tt), rr * np.sin(tt))
        angular = -va[..., 0] * np.sin(tt) + va[..., 1] * np.cos(tt)
        return {"radial": radial, "angular": angular}

    def _divergence(self, j: int, W: np.ndarray, W_edge: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Finite-volume div(V-bar W) on the polar cells and the matching boundary flux."""
        assert self._faces is not None
        g = self.grid
        vr = self._faces["radial"][j]
        va = self._faces["angular"][j]
        r, dr = g.r, g.dr
        dth = 2.0 * np.pi / g.n_theta
        W_faces = np.vstack([0.5 * (W[:-1] + W[1:]), W_edge[None, :]])
        radial_flux = g.r_faces[1:, None] * vr * W_faces
        inner = np.vstack([np.zeros((1, g.n_theta)), radial_flux[:-1]])
        div = (radial_flux - inner) / (r[:, None] * dr)
        W_ang = 0.5 * (W + np.roll(W, -1, axis=1))
        ang_flux = va * W_ang
        div += (ang_flux - np.roll(ang_flux, 1, axis=1)) / (r[:, None] * dth)
        return div, vr[-1] * W_edge

    def _x_stencil(
        self, field: "DiskField", j: int, n: int, weights_fn: Callable[[int], Tuple[np.ndarray, np.ndarray]]
    ) -> np.ndarray:
        idx, w = weights_fn(j)
        out = np.zeros((self.grid.n_r, self.grid.n_theta))
        for jj, ww in zip(idx, w):
            if ww != 0.0:
                out += ww * field.slice(int(jj), n)
        return out

    def _first(self, j: int, n_points: int, h: float) -> Tuple[np.ndarray, np.ndarray]:
        if 0 < j < n_points - 1:
            return np.array([j - 1, j + 1]), np.array([-0.5, 0.5]) / h
        if j == 0:
            return np.array([0, 1, 2]), np.array([-1.5, 2.0, -0.5]) / h
        return np.array([j - 2, j - 1, j]), np.array([0.5, -2.0, 1.5]) / h

    def _second(self, j: int, n_points: int, h: float) -> Tuple[np.ndarray, np.ndarray]:
        jc = min(max(j, 1), n_points - 2)
        return np.array([jc - 1, jc, jc + 1]), np.array([1.0, -2.0, 1.0]) / h**2

    def assemble(self, j: int, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Source and boundary flux of the slice (x_j, t_n)."""
        g = self.grid
        rhs = np.zeros((g.n_r, g.n_theta))
        flux = np.zeros(g.n_theta)
        xj, tn = self.x[j], self.t[n]
        if self.phi is not None:
            values = self.phi(theta=g.theta, x=xj, t=tn)
            rhs -= (2.0 / g.radius) * values.mean()
            flux -= values
        dx = self.x[1] - self.x[0]
        dt = self.t[1] - self.t[0]
        if self.u_prev is not None:
            idx, w = self._first(j, len(self.x), dx)
            for jj, ww in zip(idx, w):
                rhs += ww * self._v[jj] * self.u_prev.slice(int(jj), n)
            idx, w = self._first(n, len(self.t), dt)
            for nn, ww in zip(idx, w):
                rhs += ww * self.u_prev.slice(j, int(nn))
        if self.u_prev2 is not None:
            idx, w = self._second(j, len(self.x), dx)
            for jj, ww in zip(idx, w):
                rhs -= ww * self.u_prev2.slice(int(jj), n)
        if self._faces is not None and (self.w_prev is not None or self.u_prev is not None):
            W = np.zeros((g.n_r, g.n_theta))
            W_edge = np.zeros(g.n_theta)
            if self.w_prev is not None:
                W += self.w_prev.values[j, n]
                W_edge += self.w_prev.values[j, n]
            if self.u_prev is not None:
                W += self.u_prev.slice(j, n)
                W_edge += self.u_prev.boundary(j, n)
            div, bflux = self._divergence(j, W, W_edge)
            rhs += div
            flux += bflux
        return rhs, flux


class DiskField:
    """Corrector u(x, y, t) of one edge and order, solved lazily slice by slice."""

    def __init__(self, problem: CorrectorProblem, tol: float = 1e-9):
        self.problem = problem
        self.edge = problem.edge
        self.order = problem.order
        self.grid = problem.grid
        self.x = problem.x
        self.t = problem.t
        self.tol = tol
        self.is_zero = problem.is_trivial
        self._cache: Dict[Tuple[int, int], Optional[np.ndarray]] = {}
        self.mean_defect: Dict[Tuple[int, int], float] = {}

    def modes(self, j: int, n: int) -> Optional[np.ndarray]:
        key = (j, n)
        if key not in self._cache:
            if self.is_zero or n == 0:
                self._cache[key] = None
            else:
                rhs, flux = self.problem.assemble(j, n)
                if not np.any(rhs) and not np.any(flux):
                    self._cache[key] = None
                else:
                    modes = solve_disk_neumann(rhs, flux, self.grid, tol=self.tol)
                    self._cache[key] = modes
                    self.mean_defect[key] = abs(self.grid.mean(disk_values(modes, self.grid)))
        return self._cache[key]

    def slice(self, j: int, n: int) -> np.ndarray:
        m = self.modes(j, n)
        if m is None:
            return np.zeros((self.grid.n_r, self.grid.n_theta))
        return disk_values(m, self.grid)

    def boundary(self, j: int, n: int) -> np.ndarray:
        m = self.modes(j, n)
        if m is None:
            return np.zeros(self.grid.n_theta)
        return boundary_trace(m, self.grid)

    def solved_slices(self) -> int:
        return sum(1 for v in self._cache.values() if v is not None)

    def __call__(self, x: np.ndarray, r: np.ndarray, theta: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Bilinear in (x, t) between grid slices, polar reconstruction inside a slice."""
        x, r, theta, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, r, theta, t)))
        out = np.zeros(x.shape)
        if self.is_zero:
            return out
        fx = np.clip((x - self.x[0]) / (self.x[1] - self.x[0]), 0, len(self.x) - 1 - 1e-12)
        ft = np.clip((t - self.t[0]) / (self.t[1] - self.t[0]), 0, len(self.t) - 1 - 1e-12)
        j0 = np.floor(fx).astype(int)
        n0 = np.floor(ft).astype(int)
        ax = fx - j0
        at = ft - n0
        for dj in (0, 1):
            for dn in (0, 1):
                weight = (ax if dj else 1 - ax) * (at if dn else 1 - at)
                keys = np.stack([j0 + dj, n0 + dn], axis=-1).reshape(-1, 2)
                flat_w = weight.ravel()
                for key in {tuple(k) for k in keys[flat_w > 0]}:
                    modes = self.modes(int(key[0]), int(key[1]))
                    if modes is None:
                        continue
                    sel = np.all(keys == key, axis=1) & (flat_w > 0)
                    vals = evaluate_modes(modes, self.grid, r.ravel()[sel], theta.ravel()[sel])
                    out.ravel()[np.flatnonzero(sel)] += flat_w[sel] * vals
        return out

    def slice_frame(self, j: int, n: int) -> pd.DataFrame:
        """One slice as a table (debug dump)."""
        rr, tt = np.meshgrid(self.grid.r, self.grid.theta, indexing="ij")
        return pd.DataFrame({"r": rr.ravel(), "theta": tt.ravel(), "u": self.slice(j, n).ravel()})


def zero_corrector(
    edge: int, order: Order, grid: DiskGrid, x: np.ndarray, t: np.ndarray, velocity: EdgeVelocity
) -> DiskField:
    return DiskField(CorrectorProblem(edge, order, grid, x, t, velocity, None, None, None))


def build_corrector(
    order: Order,
    edge: int,
    grid: DiskGrid,
    x: np.ndarray,
    t: np.ndarray,
    velocity: EdgeVelocity,
    w_prev: Optional[EdgeField],
    u_prev: Optional[DiskField],
    u_prev2: Optional[DiskField],
    phi: Optional[Expression] = None,
    tol: float = 1e-9,
) -> DiskField:
    """Corrector of the given order; the lateral interaction enters only the first interaction order."""
    if order in (BASE_FRACTIONAL, BASE_INTEGER):
        return zero_corrector(edge, order, grid, x, t, velocity)
    problem = CorrectorProblem(
        edge,
        order,
        grid,
        x,
        t,
        velocity,
        w_prev,
        u_prev,
        u_prev2,
        phi if order == FIRST_INTERACTION else None,
    )
    return DiskField(problem, tol=tol)
