"""Discrete-time QBD layer for the per-device queues.

Levels count packets in the buffer; phases track where the head-of-line
packet is in the access procedure.  For the scheduled scheme phase 0 is the
random-access scheduling request and phases 1..N are the N granted slots.
The grant-free scheme is the one-phase special case (a Geo/Geo/1 queue).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConditioningError, ConvergenceError, DomainError, TruncationError
from .spatial import Pmf

ROW_TOL = 1e-12
R_EPS = 1e-10
R_MAX_ITER = 100_000
WAIT_TAIL_EPS = 1e-9
WAIT_J_MAX = 1_000_000
# the delay PMF costs about (levels)^2 phase-vector updates; past this many
# levels only the closed-form moments are produced
WAIT_MAX_LEVELS = 5_000
MAX_LEVELS = 10_000_000


@dataclass(frozen=True)
class PhaseMatrices:
    """S: phase moves without a departure; G: phase moves with a departure."""

    S: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        G = np.asarray(self.G, dtype=float)
        if S.shape != G.shape or S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise DomainError("S and G must be square matrices of equal size")
        if (S < 0).any() or (G < 0).any() or (S > 1).any() or (G > 1).any():
            raise DomainError("phase matrix entries must lie in [0, 1]")
        if ((S + G).sum(axis=1) > 1 + ROW_TOL).any():
            raise DomainError("rows of S + G must sum to at most 1")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "G", G)

    @property
    def size(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class QbdBlocks:
    B: float
    C: np.ndarray
    E: np.ndarray
    A0: np.ndarray
    A1: np.ndarray
    A2: np.ndarray


@dataclass(frozen=True)
class SteadyState:
    """Matrix-geometric steady state: x_i = x1 R^(i-1) for i >= 1."""

    x0: float
    x1: np.ndarray
    R: np.ndarray
    phi: np.ndarray
    balance_residual: float

    def level(self, i: int) -> np.ndarray:
        if i == 0:
            return np.array([self.x0])
        return self.x1 @ np.linalg.matrix_power(self.R, i - 1)


@dataclass(frozen=True)
class QueueMetrics:
    mean_queue_len: float
    wait_pmf: Optional[Pmf]
    wait_mean: float
    wait_var: float
    dispersion: float


def _check_prob(name, value):
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")


def build_scul_phase_matrices(p_ra: float, p_aval: float, p_tx: float, n_slots: int) -> PhaseMatrices:
    """Phase matrices of the scheduled scheme with an N-slot grant."""
    for name, value in (("p_ra", p_ra), ("p_aval", p_aval), ("p_tx", p_tx)):
        _check_prob(name, value)
    if n_slots < 1 or int(n_slots) != n_slots:
        raise DomainError(f"n_slots must be an integer >= 1, got {n_slots!r}")
    n = n_slots + 1
    S = np.zeros((n, n))
    G = np.zeros((n, n))
    S[0, 0] = (1 - p_ra) + p_ra * (1 - p_aval)
    S[0, 1] = p_ra * p_aval
    for i in range(1, n_slots):
        S[i, i + 1] = 1 - p_tx
        G[i, i + 1] = p_tx
    S[n_slots, 0] = 1 - p_tx
    G[n_slots, 0] = p_tx
    return PhaseMatrices(S, G)


def scalar_phase_matrices(p: float) -> PhaseMatrices:
    """One-phase service: depart with probability ``p`` each slot."""
    _check_prob("p", p)
    return PhaseMatrices(np.array([[1 - p]]), np.array([[p]]))


def assemble_qbd(a: float, pm: PhaseMatrices) -> QbdBlocks:
    _check_prob("a", a)
    n = pm.size
    abar = 1 - a
    C = np.zeros(n)
    C[0] = a
    s = 1 - pm.S.sum(axis=1)
    return QbdBlocks(B=abar, C=C, E=abar * s, A0=a * pm.S,
                     A1=a * pm.G + abar * pm.S, A2=abar * pm.G)


def _r_natural(A0, A1, A2, eps, max_iter):
    R = np.zeros_like(A0)
    for _ in range(max_iter):
        nxt = A0 + R @ A1 + R @ R @ A2
        if np.max(np.abs(nxt - R)) < eps:
            return nxt
        R = nxt
    raise ConvergenceError(f"R iteration did not converge in {max_iter} steps")


def _r_logred(A0, A1, A2, eps, max_iter):
    # logarithmic reduction for G, then R = A0 (I - A1 - A0 G)^-1
    eye = np.eye(A0.shape[0])
    up = np.linalg.solve(eye - A1, A0)
    down = np.linalg.solve(eye - A1, A2)
    G = down.copy()
    T = up.copy()
    for _ in range(max_iter):
        U = up @ down + down @ up
        up = np.linalg.solve(eye - U, up @ up)
        down = np.linalg.solve(eye - U, down @ down)
        G = G + T @ down
        T = T @ up
        if np.max(np.abs(T)) < eps:
            break
    else:
        raise ConvergenceError(f"logarithmic reduction did not converge in {max_iter} steps")
    return _solve_left_matrix(eye - A1 - A0 @ G, A0)


def _solve_left_matrix(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Return X @ inv(M)."""
    return np.linalg.solve(M.T, X.T).T


def compute_R(blocks: QbdBlocks, eps: float = R_EPS, max_iter: int = R_MAX_ITER,
              method: str = "natural") -> np.ndarray:
    """Minimal nonnegative solution of R = A0 + R A1 + R^2 A2.

    ``natural`` is plain successive substitution from zero; its rate degrades
    as the chain nears criticality.  ``logred`` uses logarithmic reduction,
    which converges quadratically and is what the coupled solver uses.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    A0, A1, A2 = blocks.A0, blocks.A1, blocks.A2
    if A0.any():
        _check_drift(A0, A1, A2)
    if method == "natural":
        R = _r_natural(A0, A1, A2, eps, max_iter)
    elif method == "logred":
        if not A0.any():
            return np.zeros_like(A0)
        R = np.clip(_r_logred(A0, A1, A2, eps, min(max_iter, 200)), 0.0, None)
    else:
        raise DomainError(f"unknown R method {method!r}")
    if R.size and np.max(np.abs(np.linalg.eigvals(R))) >= 1.0:
        raise ConvergenceError("R has spectral radius >= 1; the chain is not positive recurrent")
    return R


def _check_drift(A0, A1, A2) -> None:
    # positive recurrence iff the level drifts down under the phase-stationary law;
    # without this an unstable chain lets R creep to spectral radius 1 - eps
    try:
        nu = solve_nu(A0 + A1 + A2)
    except ConditioningError:
        return  # no unique phase law; rely on the spectral check
    e = np.ones(A0.shape[0])
    if not float(nu @ A2 @ e) > float(nu @ A0 @ e):
        raise ConvergenceError("mean level drift is nonnegative; the chain is not positive recurrent")


def stationary_nu(p_ra: float, p_aval: float, n_slots: int) -> np.ndarray:
    """Stationary vector of the scheduled phase process S + G."""
    _check_prob("p_ra", p_ra)
    _check_prob("p_aval", p_aval)
    g = p_ra * p_aval
    nu = np.full(n_slots + 1, g / (1 + n_slots * g))
    nu[0] = 1 / (1 + n_slots * g)
    return nu


def solve_nu(A: np.ndarray) -> np.ndarray:
    """Stationary vector of an arbitrary stochastic matrix: nu A = nu, nu e = 1."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    M = (A - np.eye(n)).T
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        nu = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("nu A = nu has no unique normalised solution") from exc
    return nu


def stability_margin(nu: np.ndarray, a: float, pm: PhaseMatrices) -> float:
    """Mean departure drift minus mean arrival drift; stable iff positive."""
    e = np.ones(pm.size)
    return float((1 - a) * nu @ pm.G @ e - a * nu @ pm.S @ e)


def _solve_left(M: np.ndarray, row: np.ndarray) -> np.ndarray:
    """Return row @ inv(M) via a linear solve."""
    return np.linalg.solve(M.T, row)


def _check_conditioning(M: np.ndarray, what: str) -> None:
    if np.linalg.cond(M) > 1e12:
        raise ConditioningError(f"{what} is numerically singular")


def steady_state(blocks: QbdBlocks, R: np.ndarray) -> SteadyState:
    """Boundary solve x1 = x0 C + x1 (A1 + R A2) with x0 + x1 (I - R)^-1 e = 1."""
    n = R.shape[0]
    eye = np.eye(n)
    boundary = eye - blocks.A1 - R @ blocks.A2
    I_R = eye - R
    _check_conditioning(boundary, "I - A1 - R A2")
    _check_conditioning(I_R, "I - R")
    y = _solve_left(boundary, blocks.C)
    z = np.linalg.solve(I_R, np.ones(n))
    x0 = 1.0 / (1.0 + float(y @ z))
    x1 = x0 * y
    phi = _solve_left(I_R, x1)
    x2 = x1 @ R
    x3 = x2 @ R
    residual = max(
        abs(x0 * blocks.B + float(x1 @ blocks.E) - x0),
        float(np.max(np.abs(x0 * blocks.C + x1 @ blocks.A1 + x2 @ blocks.A2 - x1))),
        float(np.max(np.abs(x1 @ blocks.A0 + x2 @ blocks.A1 + x3 @ blocks.A2 - x2))),
    )
    return SteadyState(x0=x0, x1=x1, R=R, phi=phi, balance_residual=residual)


def mean_queue_length_scul(ss: SteadyState) -> float:
    """Mean number of packets waiting behind the head of line: x1 R (I - R)^-2 e."""
    n = ss.R.shape[0]
    I_R = np.eye(n) - ss.R
    v = np.linalg.solve(I_R, np.linalg.solve(I_R, np.ones(n)))
    return max(0.0, float(ss.x1 @ ss.R @ v))


def _level_stack(ss: SteadyState, tail_eps: float) -> tuple[np.ndarray, float]:
    """Rows x_1..x_K with the mass beyond level K below ``tail_eps / 10``."""
    n = ss.R.shape[0]
    inv_e = np.linalg.solve(np.eye(n) - ss.R, np.ones(n))
    rows = []
    x = ss.x1
    tail = float(x @ inv_e)
    while tail >= tail_eps / 10:
        rows.append(x)
        x = x @ ss.R
        tail = float(x @ inv_e)
        if len(rows) > MAX_LEVELS:
            raise TruncationError("level distribution does not decay")
    if not rows:
        return np.zeros((0, n)), max(tail, 0.0)
    return np.array(rows), max(tail, 0.0)


def _pmf_moments(probs: np.ndarray) -> tuple[float, float, float]:
    j = np.arange(len(probs))
    mean = float(j @ probs)
    var = float(((j - mean) ** 2) @ probs)
    dispersion = var / mean if mean > 0 else 0.0
    return mean, var, dispersion


def waiting_time_scul(ss: SteadyState, pm: PhaseMatrices, tail_eps: float = WAIT_TAIL_EPS,
                      j_max: int = WAIT_J_MAX) -> QueueMetrics:
    """Queueing-delay PMF: slots until the packets found ahead have all departed.

    An arrival that finds v packets waits for v departures of the phase
    process started from the phase it finds; the B-stencils are propagated
    forward over (remaining departures, phase) for all v at once.
    """
    _check_level_budget(ss, tail_eps)
    levels, level_tail = _level_stack(ss, tail_eps)
    probs = [ss.x0]
    w = levels.copy()
    done = ss.x0
    j = 0
    while done <= 1.0 - tail_eps and w.size:
        j += 1
        if j > j_max:
            raise TruncationError(f"waiting-time PMF did not reach mass 1 - {tail_eps} by j={j_max}")
        wS = w @ pm.S
        wG = w @ pm.G
        p_j = float(wG[0].sum())
        probs.append(p_j)
        done += p_j
        wS[:-1] += wG[1:]
        w = wS
        if float(w.sum()) < tail_eps / 10:
            break
    probs = np.array(probs)
    tail = max(0.0, float(w.sum()) + level_tail)
    mean, var, dispersion = _pmf_moments(probs)
    return QueueMetrics(mean_queue_len=mean_queue_length_scul(ss), wait_pmf=Pmf(probs, tail),
                        wait_mean=mean, wait_var=var, dispersion=dispersion)


def _check_level_budget(ss: SteadyState, tail_eps: float) -> None:
    radius = float(np.max(np.abs(np.linalg.eigvals(ss.R)))) if ss.R.size else 0.0
    if radius == 0.0 or not ss.x1.any():
        return
    n = ss.R.shape[0]
    tail = float(ss.x1 @ np.linalg.solve(np.eye(n) - ss.R, np.ones(n)))
    needed = np.log(tail_eps / 10 / tail) / np.log(radius) if tail > tail_eps / 10 else 0.0
    if needed > WAIT_MAX_LEVELS:
        raise TruncationError(f"delay PMF needs about {needed:.0f} levels (limit {WAIT_MAX_LEVELS}); "
                              "the chain is too close to critical")


def wait_moments_scul(ss: SteadyState, pm: PhaseMatrices) -> tuple[float, float]:
    """Mean and variance of the queueing delay from derivatives of its PGF at z = 1.

    With D(z) = z (I - zS)^-1 G the transform of the time to the next
    departure, the PGF is x0 + sum_v x1 R^(v-1) D(z)^v e.  The sum over v
    becomes a single inverse in the Kronecker space of (D^T, R).
    """
    n = pm.size
    eye = np.eye(n)
    U = np.linalg.inv(eye - pm.S)
    D = U @ pm.G
    D1 = U @ (pm.G + pm.S @ D)
    D2 = 2 * U @ pm.S @ D1
    K = np.kron(D.T, ss.R)
    K1 = np.kron(D1.T, ss.R)
    K2 = np.kron(D2.T, ss.R)
    big = np.eye(n * n) - K
    _check_conditioning(big, "I - D(1)^T (x) R")
    solve = lambda v: np.linalg.solve(big, v)  # noqa: E731
    vec = lambda M: M.flatten(order="F")  # noqa: E731
    c = np.kron(np.ones(n), ss.x1)
    h = solve(vec(D))
    # F' = F K' F, F'' = F K'' F + 2 F K' F K' F with F = (I - K)^-1
    f1_vec_d = solve(K1 @ h)
    h1 = f1_vec_d + solve(vec(D1))
    h2 = (solve(K2 @ h) + 2 * solve(K1 @ f1_vec_d)
          + 2 * solve(K1 @ solve(vec(D1))) + solve(vec(D2)))
    mean = float(c @ h1)
    factorial2 = float(c @ h2)
    return mean, max(0.0, factorial2 + mean - mean * mean)


def closed_form_metrics(ss: SteadyState, pm: PhaseMatrices) -> QueueMetrics:
    """Queue metrics without the delay PMF, for chains too close to critical to expand."""
    mean, var = wait_moments_scul(ss, pm)
    return QueueMetrics(mean_queue_len=mean_queue_length_scul(ss), wait_pmf=None, wait_mean=mean,
                        wait_var=var, dispersion=var / mean if mean > 0 else 0.0)


@dataclass(frozen=True)
class GeoGeo1:
    stable: bool
    x0: float
    R: float
    metrics: Optional[QueueMetrics]


def raul_chain(a: float, p: float, tail_eps: float = WAIT_TAIL_EPS) -> GeoGeo1:
    """Closed-form Geo/Geo/1 solution of the grant-free queue."""
    _check_prob("a", a)
    _check_prob("p", p)
    abar, pbar = 1 - a, 1 - p
    if not abar * p > a * pbar:
        return GeoGeo1(stable=False, x0=0.0, R=float("nan"), metrics=None)
    x0 = (p - a) / p
    R = a * pbar / (abar * p)
    mean_q = a * a * pbar * x0 / (p - a) ** 2
    wait_mean = a * abar * x0 / (p - a) ** 2

    # x_v = x1 R^(v-1); remaining-departure masses propagate by the scalar stencil
    x1 = a * x0 / (abar * p)
    masses = []
    x = x1
    tail = x1 / (1 - R)
    while tail >= tail_eps / 10:
        masses.append(x)
        x *= R
        tail = x / (1 - R)
    level_tail = tail if masses else 0.0
    w = np.array(masses)
    probs = [x0]
    done = x0
    while done <= 1.0 - tail_eps and w.size:
        p_j = w[0] * p
        probs.append(p_j)
        done += p_j
        nxt = w * pbar
        nxt[:-1] += w[1:] * p
        w = nxt
        if w.sum() < tail_eps / 10:
            break
        if len(probs) > WAIT_J_MAX:
            raise TruncationError("Geo/Geo/1 waiting-time PMF did not converge")
    probs = np.array(probs)
    j = np.arange(len(probs))
    var = float(((j - wait_mean) ** 2) @ probs)
    metrics = QueueMetrics(mean_queue_len=mean_q,
                           wait_pmf=Pmf(probs, max(0.0, float(w.sum()) + level_tail)),
                           wait_mean=wait_mean, wait_var=var,
                           dispersion=var / wait_mean if wait_mean > 0 else 0.0)
    return GeoGeo1(stable=True, x0=x0, R=R, metrics=metrics)
