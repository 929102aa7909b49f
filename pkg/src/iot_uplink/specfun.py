"""Scalar special functions used by the interference expressions.

Only the narrow slice of the Gauss hypergeometric function that appears in
the Laplace transform of PPP interference is implemented:

    2F1(1, 1 - d, 2 - d; -z),   d = 2 / eta,  z >= 0.

The same code path works on Python floats and on ``mpmath.mpf`` values, so
the multiprecision capture sums in :mod:`iot_uplink.spatial` reuse it.
"""

from __future__ import annotations

import math

import mpmath

from .errors import DomainError

SERIES_RTOL = 1e-15
MAX_TERMS = 100_000


def _check_eta(eta) -> None:
    if not eta > 2:
        raise DomainError(f"path-loss exponent must exceed 2, got {eta!r}")


def _is_mp(z) -> bool:
    return isinstance(z, mpmath.mpf)


def _sum_series(first, ratio, rtol):
    """Sum terms t_0 = first, t_{n+1} = t_n * ratio(n)."""
    total = first
    term = first
    for n in range(MAX_TERMS):
        term = term * ratio(n)
        total += term
        if abs(term) <= rtol * abs(total):
            return total
    raise DomainError("hypergeometric series did not converge within the term cap")


def hyp2f1_interference(eta, z):
    """Return 2F1(1, 1 - 2/eta, 2 - 2/eta; -z).

    Three regimes keep every series short:

    * ``z < 0.5``: direct power series in ``-z``;
    * ``0.5 <= z <= 2``: Pfaff transform to the argument ``z / (1 + z)``;
    * ``z > 2``: the 1/z connection formula, whose second branch collapses
      to a pure power because ``b - c + 1 = 0`` for these parameters.

    Accepts floats or ``mpmath.mpf``; the result has the type of ``z``
    promoted accordingly.
    """
    _check_eta(eta)
    if z < 0:
        raise DomainError(f"argument must be nonnegative, got {z!r}")

    mp = _is_mp(z)
    one = mpmath.mpf(1) if mp else 1.0
    rtol = mpmath.mp.eps if mp else SERIES_RTOL
    gamma = mpmath.gamma if mp else math.gamma

    delta = 2 * one / eta
    b = 1 - delta
    c = 2 - delta
    if z == 0:
        return one
    if z < 0.5:
        # (1)_n (b)_n / ((c)_n n!) = b / (b + n) since c = b + 1
        return _sum_series(one, lambda n: -z * (b + n) / (b + n + 1), rtol)
    if z <= 2:
        x = z / (1 + z)
        # 2F1(1, 1; c; x): term ratio (n + 1) x / (c + n)
        return _sum_series(one, lambda n: (n + 1) * x / (c + n), rtol) / (1 + z)
    w = -1 / z
    tail = _sum_series(one, lambda n: w * (delta + n) / (delta + n + 1), rtol)
    lead = gamma(2 - delta) * gamma(delta) * z ** (delta - 1)
    return lead - (1 - delta) / delta * tail / z


def ln_gamma(x: float) -> float:
    """Natural log of the gamma function for positive real ``x``."""
    if not x > 0:
        raise DomainError(f"ln_gamma requires x > 0, got {x!r}")
    return math.lgamma(x)


def gamma_ratio(n: int, t: float) -> float:
    """Return Gamma(n) Gamma(2 + t) / Gamma(2 + n + t) in the log domain.

    This is the beta function B(n, 2 + t); it lies in (0, 1] for n >= 1, t >= 0.
    """
    if n < 1 or int(n) != n:
        raise DomainError(f"n must be a positive integer, got {n!r}")
    if t < 0:
        raise DomainError(f"t must be nonnegative, got {t!r}")
    return math.exp(ln_gamma(n) + ln_gamma(2.0 + t) - ln_gamma(2.0 + n + t))
