"""Boundary-layer terms near the outflow bases.

Each term is a polynomial in the fast variable eta = (ell_i - x_i)/eps with
time-sampled coefficients, times exp(-v eta).
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from junctionflow.edge_transport import TimeSignal
from junctionflow.errors import NonpositiveOutflowSpeed
from junctionflow.geometry import NetworkSpec, cutoff_chi_delta
from junctionflow.orders import Order

# (t, n) -> d^n/dt^n of the base datum, evaluated exactly at any time
RepairFunction = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class LayerTerm:
    """Pi(eta, t) = (sum_j a_j(t) eta^j) exp(-v eta)."""

    edge: int
    order: Order
    t: np.ndarray
    coeffs: np.ndarray
    v_end: float
    repair: Optional[RepairFunction] = None

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def decay_margin(self) -> float:
        return 0.5 * self.v_end

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    def coefficient(self, j: int) -> TimeSignal:
        return TimeSignal(self.t, self.coeffs[j])

    def coefficients_at(self, t: np.ndarray, dt: int = 0) -> np.ndarray:
        """Coefficient values at times t, shape (degree + 1,) + t.shape.

        With a repair function the constant coefficient is the exact base datum.
        """
        rows = [self.coefficient(j)(t, derivative=dt) for j in range(self.degree + 1)]
        if self.repair is not None:
            rows[0] = np.broadcast_to(self.repair(np.asarray(t, dtype=float), dt), np.shape(t))
        return np.stack(rows)

    def __call__(self, eta: np.ndarray, t: np.ndarray, d_eta: int = 0, dt: int = 0) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        t = np.asarray(t, dtype=float)
        eta, t = np.broadcast_arrays(eta, t)
        if self.is_zero:
            return np.zeros(eta.shape)
        a = self.coefficients_at(t, dt)
        poly = _poly_with_derivatives(a, eta, self.v_end, d_eta)
        return poly * np.exp(-self.v_end * eta)


def _poly_with_derivatives(a: np.ndarray, eta: np.ndarray, v: float, n: int) -> np.ndarray:
    """Polynomial factor of d^n/d eta^n [P(eta) exp(-v eta)]."""
    coeffs = a.copy()
    for _ in range(n):
        shifted = np.zeros_like(coeffs)
        degree = coeffs.shape[0] - 1
        for j in range(degree):
            shifted[j] = (j + 1) * coeffs[j + 1]
        coeffs = shifted - v * coeffs
    powers = np.stack([eta**j for j in range(coeffs.shape[0])])
    return np.sum(coeffs * powers, axis=0)


def build_layer_term(
    order: Order,
    prev: Optional[LayerTerm],
    base_datum: TimeSignal,
    v_end: float,
    edge: int = 2,
    repair: Optional[RepairFunction] = None,
) -> LayerTerm:
    """Solve P'' - v P' = dP_prev/dt with P(0) = base datum by the exact coefficient recurrence.

    base_datum holds the datum on the time grid; repair, when given, evaluates it
    exactly between grid times.
    """
    if v_end <= 0:
        raise NonpositiveOutflowSpeed(f"boundary layer needs a positive outflow speed, got {v_end}")
    t = base_datum.t
    if prev is None:
        return LayerTerm(edge, order, t, base_datum.values[None, :].copy(), v_end, repair)
    K = prev.degree
    g = prev.coefficients_at(t, dt=1)
    a = np.zeros((K + 2, len(t)))
    a[0] = base_datum.values
    a[K + 1] = -g[K] / (v_end * (K + 1))
    for j in range(K - 1, -1, -1):
        a[j + 1] = ((j + 2) * (j + 1) * a[j + 2] - g[j]) / (v_end * (j + 1))
    # data vanish with their time derivatives at t = 0
    a[:, t <= t[0]] = 0.0
    return LayerTerm(edge, order, t, a, v_end, repair)


def layer_ode_residual(
    term: LayerTerm, prev: Optional[LayerTerm], n_samples: int = 100, eta_max: float = 20.0, seed: int = 0
) -> float:
    """max |Pi'' + v Pi' - dPi_prev/dt| over random (eta, grid time) samples."""
    rng = np.random.default_rng(seed)
    eta = rng.uniform(0.0, eta_max, n_samples)
    idx = rng.integers(0, len(term.t), n_samples)
    a = term.coeffs[:, idx]
    v = term.v_end
    lhs = _poly_with_derivatives(a, eta, v, 2) + v * _poly_with_derivatives(a, eta, v, 1)
    if prev is not None:
        g = prev.coefficients_at(term.t, dt=1)[:, idx]
        lhs = lhs - _poly_with_derivatives(g, eta, v, 0)
    return float(np.max(np.abs(lhs * np.exp(-v * eta))))


def layer_decay_bound(term: LayerTerm, eta_max: float = 20.0, n_eta: int = 401) -> float:
    """sup over t and eta of |Pi| exp(theta eta)."""
    eta = np.linspace(0.0, eta_max, n_eta)
    a = term.coeffs
    poly = np.stack([np.polyval(a[::-1, n], eta) for n in range(a.shape[1])])
    return float(np.max(np.abs(poly) * np.exp(-(term.v_end - term.decay_margin) * eta)[None, :]))


def eval_layer(
    term: LayerTerm,
    spec: NetworkSpec,
    x_i: np.ndarray,
    t: np.ndarray,
    eps: float,
    delta: float,
) -> np.ndarray:
    """chi_delta(x_i) * Pi((ell_i - x_i)/eps, t)."""
    x_i = np.asarray(x_i, dtype=float)
    xb, tb = np.broadcast_arrays(x_i, np.asarray(t, dtype=float))
    chi = cutoff_chi_delta(spec, term.edge, xb, delta)
    out = np.zeros(xb.shape)
    active = chi > 0
    if np.any(active):
        eta = (spec.length(term.edge) - xb[active]) / eps
        out[active] = chi[active] * term(eta, tb[active])
    return out
