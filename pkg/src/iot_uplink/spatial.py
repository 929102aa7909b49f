"""Stochastic-geometry layer: success probabilities under the SINR capture model.

All quantities are for a typical device served by a typical base station,
with BSs and devices forming independent PPPs and devices inverting their
path loss towards the nearest BS.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass
from typing import Sequence

import mpmath
import numpy as np

from .errors import ConditioningError, DomainError, TruncationError
from .specfun import gamma_ratio, hyp2f1_interference

CELL_CONST = 3.575
TAIL_EPS = 1e-9
MAX_PMF_TERMS = 1_000_000
CAPTURE_SLACK = 1e-6
# The multiprecision sum costs roughly cubically in the neighbour count;
# past this limit one evaluation takes minutes, so it is refused.
MAX_CAPTURE_NEIGHBORS = 1200


def db_to_linear(value_db: float) -> float:
    return 10.0 ** (value_db / 10.0)


def dbm_to_watts(value_dbm: float) -> float:
    return 10.0 ** ((value_dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class SystemParams:
    """Scenario description in linear units.

    Intensities are per km^2, powers in watts, thresholds are linear SINR
    values.  ``alpha`` (devices per BS) is derived from the two intensities.
    """

    bs_intensity: float = 1.0
    device_intensity: float = 100.0
    eta: float = 4.0
    rho: float = 1e-12
    noise: float = 1e-12
    arrival: float = 0.1
    theta_sr: float = db_to_linear(-7.0)
    theta_tx: float = db_to_linear(-5.0)
    theta_ul: float = db_to_linear(-5.0)
    n_zc: int = 64
    n_chan: int = 55
    q_blocks: int = 50
    n_slots: int = 3
    cell_const: float = CELL_CONST
    tail_eps: float = TAIL_EPS

    def __post_init__(self):
        for name in ("bs_intensity", "rho", "theta_sr", "theta_tx", "theta_ul", "cell_const", "tail_eps"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not self.device_intensity >= 0:
            raise DomainError(f"device_intensity must be nonnegative, got {self.device_intensity!r}")
        if not self.noise >= 0:
            raise DomainError(f"noise must be nonnegative, got {self.noise!r}")
        if not self.eta > 2:
            raise DomainError(f"eta must exceed 2, got {self.eta!r}")
        if not 0.0 <= self.arrival <= 1.0:
            raise DomainError(f"arrival must lie in [0, 1], got {self.arrival!r}")
        for name in ("n_zc", "n_chan", "q_blocks", "n_slots"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise DomainError(f"{name} must be an integer >= 1, got {value!r}")

    @property
    def alpha(self) -> float:
        return self.device_intensity / self.bs_intensity

    @property
    def noise_ratio(self) -> float:
        return self.noise / self.rho

    def with_alpha(self, alpha: float) -> "SystemParams":
        return dataclasses.replace(self, device_intensity=alpha * self.bs_intensity)

    def replace(self, **changes) -> "SystemParams":
        if "alpha" in changes:
            alpha = changes.pop("alpha")
            changes["device_intensity"] = alpha * changes.get("bs_intensity", self.bs_intensity)
        return dataclasses.replace(self, **changes)

    @classmethod
    def reference_scenario(cls, alpha: float = 100.0, bandwidth_mhz: int = 10, n_slots: int = 3,
                arrival: float = 0.1, bs_intensity: float = 1.0) -> "SystemParams":
        """Reference scenario: 10 MHz gives q=50 / n_c=55, 20 MHz gives q=105 / n_c=110."""
        blocks = {10: (50, 55), 20: (105, 110)}
        if bandwidth_mhz not in blocks:
            raise DomainError(f"bandwidth must be 10 or 20 MHz, got {bandwidth_mhz!r}")
        q, n_c = blocks[bandwidth_mhz]
        return cls(bs_intensity=bs_intensity, device_intensity=alpha * bs_intensity,
                   arrival=arrival, q_blocks=q, n_chan=n_c, n_slots=n_slots,
                   rho=dbm_to_watts(-90.0), noise=dbm_to_watts(-90.0))


@dataclass(frozen=True)
class Pmf:
    """Truncated PMF on {0, 1, ...}; ``tail_mass`` is the mass beyond the last entry."""

    probs: np.ndarray
    tail_mass: float

    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.probs)), self.probs))

    def cdf(self, n: int) -> float:
        if n < 0:
            return 0.0
        return math.fsum(self.probs[: n + 1])


def _nb_terms(load: float, cell_const: float):
    """Yield P{N = n} for n = 0, 1, ... of the gamma-mixed Poisson cell load."""
    c = cell_const
    p = (c / (load + c)) ** c
    ratio = load / (load + c)
    n = 0
    while True:
        yield p
        p = p * (n + c) / (n + 1) * ratio
        n += 1


def neighbor_pmf(effective_intensity: float, bs_intensity: float, tail_eps: float = TAIL_EPS,
                 cell_const: float = CELL_CONST) -> Pmf:
    """Number of co-channel devices sharing the typical device's cell.

    Negative-binomial form Gamma(n+c)/(Gamma(n+1)Gamma(c)) m^n (lc)^c / (m+lc)^(n+c),
    truncated at the first n where the remaining mass drops below ``tail_eps``.
    """
    if effective_intensity < 0:
        raise DomainError(f"effective intensity must be nonnegative, got {effective_intensity!r}")
    if not bs_intensity > 0:
        raise DomainError(f"BS intensity must be positive, got {bs_intensity!r}")
    load = effective_intensity / bs_intensity
    if load == 0:
        return Pmf(np.array([1.0]), 0.0)
    probs = []
    mass = 0.0
    for p in _nb_terms(load, cell_const):
        probs.append(p)
        mass += p
        if 1.0 - mass < tail_eps and p < tail_eps:
            break
        if len(probs) >= MAX_PMF_TERMS:
            raise TruncationError("neighbor PMF did not reach its mass target")
    arr = np.array(probs)
    return Pmf(arr, max(0.0, 1.0 - math.fsum(probs)))


def laplace_intercell(k_theta: float, load_ratio: float, eta: float) -> float:
    """Approximate LT of intercell interference at normalised argument k*theta."""
    if k_theta < 0 or load_ratio < 0:
        raise DomainError("laplace_intercell arguments must be nonnegative")
    if k_theta == 0 or load_ratio == 0:
        return 1.0
    f = hyp2f1_interference(eta, k_theta)
    return math.exp(-2.0 * k_theta * load_ratio * f / (eta - 2.0))


def laplace_intracell(k_theta: float, n: int) -> float:
    """LT of intracell interference given ``n`` other devices in the cell.

    (n+1)/(1+s) (1/n - B(n, 2+s)) with s = k*theta; 1 when n = 0 or s = 0.
    """
    if k_theta < 0:
        raise DomainError(f"k_theta must be nonnegative, got {k_theta!r}")
    if n < 0 or int(n) != n:
        raise DomainError(f"n must be a nonnegative integer, got {n!r}")
    if n == 0 or k_theta == 0:
        return 1.0
    return (n + 1) / (1.0 + k_theta) * (1.0 / n - gamma_ratio(n, k_theta))


# ---------------------------------------------------------------------------
# Capture probability.  The alternating binomial sum over k has terms of size
# up to 2^(n+1), so it is evaluated in multiprecision.  Tables that do not
# depend on the interferer load are cached per (theta, ..., precision).


def _precision_for(n_max: int) -> int:
    digits = 20 + math.ceil((n_max + 1) * math.log10(2.0))
    return 10 * math.ceil(digits / 10)


class _IntraRows:
    """Rows W[n][k-1] = (-1)^(k+1) C(n+1, k) L_intra(k theta | n) / (n + 1)."""

    def __init__(self, theta: float, dps: int):
        self.theta = theta
        self.dps = dps
        self.rows: list[list] = []
        self._beta: list = []  # B(n, 2 + k theta) for the last built n

    def upto(self, n_max: int) -> list[list]:
        if len(self.rows) <= n_max:
            with mpmath.workdps(self.dps):
                theta = mpmath.mpf(self.theta)
                for n in range(len(self.rows), n_max + 1):
                    self.rows.append(self._row(n, theta))
        return self.rows

    def _row(self, n: int, theta) -> list:
        if n == 0:
            return [mpmath.mpf(1)]
        # B(n, 2+s) = B(n-1, 2+s) (n-1) / (n+1+s)
        self._beta = [b * (n - 1) / (n + 1 + k * theta) for k, b in enumerate(self._beta, start=1)]
        while len(self._beta) < n + 1:
            s = (len(self._beta) + 1) * theta
            beta = 1 / (2 + s)
            for j in range(1, n):
                beta = beta * j / (j + 2 + s)
            self._beta.append(beta)
        inv_n = 1 / mpmath.mpf(n)
        row = []
        for k, beta in enumerate(self._beta, start=1):
            weight = (inv_n - beta) / (1 + k * theta)
            sign = 1 if k % 2 else -1
            row.append(sign * math.comb(n + 1, k) * weight)
        return row


@functools.lru_cache(maxsize=64)
def _intra_rows(theta: float, dps: int) -> _IntraRows:
    return _IntraRows(theta, dps)


class _InterColumns:
    """Per-k factors exp(-k theta sigma^2/rho) and the intercell exponent rate."""

    def __init__(self, theta: float, eta: float, noise_ratio: float, dps: int):
        self.theta, self.eta, self.noise_ratio, self.dps = theta, eta, noise_ratio, dps
        self.noise: list = []
        self.rate: list = []

    def upto(self, k_max: int):
        if len(self.rate) < k_max:
            with mpmath.workdps(self.dps):
                theta = mpmath.mpf(self.theta)
                eta = mpmath.mpf(self.eta)
                for k in range(len(self.rate) + 1, k_max + 1):
                    s = k * theta
                    self.noise.append(mpmath.exp(-s * mpmath.mpf(self.noise_ratio)))
                    self.rate.append(2 * s * hyp2f1_interference(eta, s) / (eta - 2))
        return self.noise, self.rate


@functools.lru_cache(maxsize=64)
def _inter_columns(theta: float, eta: float, noise_ratio: float, dps: int) -> _InterColumns:
    return _InterColumns(theta, eta, noise_ratio, dps)


def conditional_capture(theta: float, noise_ratio: float, load_ratio: float, eta: float,
                        n_max: int) -> list[float]:
    """Capture probability conditioned on n = 0..n_max co-channel neighbours."""
    dps = _precision_for(n_max)
    rows = _intra_rows(float(theta), dps).upto(n_max)
    noise, rate = _inter_columns(float(theta), float(eta), float(noise_ratio), dps).upto(n_max + 1)
    out = []
    with mpmath.workdps(dps):
        load = mpmath.mpf(load_ratio)
        factors = [nz * mpmath.exp(-load * r) for nz, r in zip(noise, rate)]
        for n in range(n_max + 1):
            out.append(float(mpmath.fdot(rows[n], factors[: n + 1])))
    return out


def capture_success_prob(theta: float, noise_ratio: float, effective_intensity: float,
                         bs_intensity: float, eta: float, tail_eps: float = TAIL_EPS,
                         cell_const: float = CELL_CONST) -> float:
    """Probability that the typical device is the strongest in its cell and clears ``theta``.

    Expectation over the neighbour PMF of the binomially expanded
    max-gain capture event, with both interference LTs evaluated at k*theta.
    """
    if theta < 0 or noise_ratio < 0:
        raise DomainError("threshold and noise ratio must be nonnegative")
    if not eta > 2:
        raise DomainError(f"eta must exceed 2, got {eta!r}")
    pmf = neighbor_pmf(effective_intensity, bs_intensity, tail_eps, cell_const)
    load = effective_intensity / bs_intensity
    if len(pmf.probs) - 1 > MAX_CAPTURE_NEIGHBORS:
        raise ConditioningError(
            f"load {load:.4g} needs {len(pmf.probs) - 1} neighbour terms "
            f"(limit {MAX_CAPTURE_NEIGHBORS})")
    cond = conditional_capture(theta, noise_ratio, load, eta, len(pmf.probs) - 1)
    for n, value in enumerate(cond):
        # (n + 1) * cond[n] is a probability conditioned on n neighbours
        scaled = (n + 1) * value
        if not -CAPTURE_SLACK <= scaled <= 1.0 + CAPTURE_SLACK:
            raise ConditioningError(f"capture sum left [0, 1] at n={n}: {scaled!r}")
    total = math.fsum(p * v for p, v in zip(pmf.probs, cond))
    if not -CAPTURE_SLACK <= total <= 1.0 + CAPTURE_SLACK:
        raise ConditioningError(f"capture probability outside [0, 1]: {total!r}")
    return min(1.0, max(0.0, total))


def ra_sr_success(params: SystemParams, phi_ra: float) -> float:
    """RA-SR success probability when a fraction ``phi_ra`` of devices contend."""
    _check_prob("phi_ra", phi_ra)
    return capture_success_prob(params.theta_sr, params.noise_ratio,
                                 phi_ra * params.device_intensity / params.n_zc,
                                 params.bs_intensity, params.eta, params.tail_eps, params.cell_const)


def ra_ul_success(params: SystemParams, busy_prob: float) -> float:
    """Grant-free uplink success probability when a fraction ``busy_prob`` is backlogged."""
    _check_prob("busy_prob", busy_prob)
    return capture_success_prob(params.theta_ul, params.noise_ratio,
                                 busy_prob * params.device_intensity / params.n_chan,
                                 params.bs_intensity, params.eta, params.tail_eps, params.cell_const)


def ea_tx_success(params: SystemParams) -> float:
    """Scheduled transmission success: noise plus one interferer per cell per block."""
    theta = params.theta_tx
    return math.exp(-theta * params.noise_ratio) * laplace_intercell(theta, 1.0, params.eta)


def availability_prob(params: SystemParams, phi_tx: Sequence[float]) -> float:
    """Probability that fewer than q blocks are reserved for the next slot.

    Devices in the last grant slot release their block and are excluded.
    """
    phi_tx = [float(v) for v in phi_tx]
    if len(phi_tx) != params.n_slots:
        raise DomainError(f"phi_tx must have {params.n_slots} entries, got {len(phi_tx)}")
    for v in phi_tx:
        _check_prob("phi_tx entry", v)
    if params.n_slots == 1:
        return 1.0
    reserved = params.device_intensity * math.fsum(phi_tx[:-1])
    load = reserved / params.bs_intensity
    if load == 0:
        return 1.0
    terms = _nb_terms(load, params.cell_const)
    total = math.fsum(next(terms) for _ in range(params.q_blocks))
    return min(1.0, max(0.0, total))


def _check_prob(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")
