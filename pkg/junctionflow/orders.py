"""Exponent bookkeeping for the Puiseux partial sums.

An order is labelled (p, k) with exponent p*alpha + k. The fractional chain
(p = 1, k >= -1) is driven by the lateral and node interactions, the integer
chain (p = 0, k >= 0) by the Dirichlet data at the bases.
"""

import math
from dataclasses import dataclass
from typing import List, Optional

FRACTIONAL = 1
INTEGER = 0


@dataclass(frozen=True, order=True)
class Order:
    """Label of one coefficient of the expansion."""

    p: int
    k: int

    def __post_init__(self) -> None:
        if self.p not in (INTEGER, FRACTIONAL):
            raise ValueError(f"p must be 0 or 1, got {self.p}")
        if self.k < -self.p:
            raise ValueError(f"Order ({self.p}, {self.k}) is below the first order of its chain")

    def exponent(self, alpha: float) -> float:
        return self.p * alpha + self.k

    @property
    def previous(self) -> Optional["Order"]:
        """Order one step down the same chain, None at the base."""
        if self.is_base:
            return None
        return Order(self.p, self.k - 1)

    @property
    def next(self) -> "Order":
        return Order(self.p, self.k + 1)

    @property
    def is_base(self) -> bool:
        return self.k == -self.p

    @property
    def chain_position(self) -> int:
        """0 for the base order of a chain, 1 for the next, and so on."""
        return self.k + self.p

    def label(self) -> str:
        if self.p == FRACTIONAL:
            if self.k == 0:
                return "alpha"
            return f"alpha{self.k:+d}"
        return str(self.k)


BASE_FRACTIONAL = Order(FRACTIONAL, -1)
BASE_INTEGER = Order(INTEGER, 0)
FIRST_INTERACTION = Order(FRACTIONAL, 0)


def floor_alpha(alpha: float) -> int:
    return int(math.floor(alpha))


def check_alpha(alpha: float) -> None:
    if alpha >= 1 or float(alpha).is_integer():
        raise ValueError(f"alpha must be a non-integer below 1, got {alpha}")


def fractional_orders(alpha: float, M: int) -> List[Order]:
    """Fractional terms with exponents alpha + k - 1, k = 0..M."""
    return [Order(FRACTIONAL, k - 1) for k in range(0, M + 1)]


def integer_orders(alpha: float, M: int) -> List[Order]:
    """Integer terms with exponents k - 1, k = 1..M + floor(alpha)."""
    return [Order(INTEGER, k - 1) for k in range(1, M + floor_alpha(alpha) + 1)]


def partial_sum_orders(alpha: float, M: int) -> List[Order]:
    """All orders of the partial sum, sorted by exponent."""
    check_alpha(alpha)
    orders = fractional_orders(alpha, M) + integer_orders(alpha, M)
    return sorted(orders, key=lambda o: (o.exponent(alpha), o.p))


def partial_sum_exponents(alpha: float, M: int) -> List[float]:
    return [o.exponent(alpha) for o in partial_sum_orders(alpha, M)]


def principal_part(alpha: float) -> List[Order]:
    """Fractional terms with negative exponent, k = 0..-floor(alpha)."""
    check_alpha(alpha)
    return [Order(FRACTIONAL, k - 1) for k in range(0, -floor_alpha(alpha) + 1)]


def last_orders(alpha: float, M: int) -> List[Order]:
    """Highest included order of each non-empty chain."""
    out = []
    frac = fractional_orders(alpha, M)
    if frac:
        out.append(frac[-1])
    ints = integer_orders(alpha, M)
    if ints:
        out.append(ints[-1])
    return out


def minimal_M(alpha: float) -> int:
    """Smallest M with M > 3/2 (1 - floor(alpha))."""
    bound = 1.5 * (1 - floor_alpha(alpha))
    return int(math.floor(bound)) + 1


def gamma_window(alpha: float) -> tuple:
    """Open interval of admissible matching exponents."""
    fa = floor_alpha(alpha)
    lower = max(2.0 / 3.0, 1.0 - (alpha - fa) / (1.0 - fa))
    return lower, 1.0


def default_gamma(alpha: float) -> float:
    lower, upper = gamma_window(alpha)
    return 0.5 * (lower + upper)


def sup_error_index(alpha: float, gamma: float, M: int) -> int:
    """Index P of the partial sum controlled in the sup norm by the order-M construction."""
    fa = floor_alpha(alpha)
    return int(math.floor(gamma * (M + fa - 1))) + 1 - fa


def energy_error_index(alpha: float, gamma: float, M: int) -> int:
    return sup_error_index(alpha, gamma, M) + 1


def sup_error_rate(alpha: float, gamma: float, M: int) -> float:
    return gamma * (M + floor_alpha(alpha) - 1)


def energy_error_rate(alpha: float, gamma: float, M: int) -> float:
    return sup_error_rate(alpha, gamma, M) - 0.5


def cylinder_residual_exponents(alpha: float, M: int) -> List[float]:
    fa = floor_alpha(alpha)
    return [M + fa - 1, alpha + M - 1]


def lateral_residual_exponents(alpha: float, M: int) -> List[float]:
    fa = floor_alpha(alpha)
    return [M + fa, alpha + M]


def blend_residual_exponent(alpha: float, gamma: float, M: int) -> float:
    return gamma * (M + floor_alpha(alpha) - 1)
