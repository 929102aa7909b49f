"""Coupled fixed point between the spatial success probabilities and the queues.

Every device sees the same interference field, which depends on how many
devices are backlogged and in which phase.  The queue, in turn, depends on
the success probabilities.  Both solvers iterate the two maps with damping
until the phase occupancy settles, checking the drift condition at every
pass.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import qbd
from .errors import DomainError, ModelError, TruncationError
from .spatial import SystemParams, availability_prob, ea_tx_success, ra_sr_success, ra_ul_success

SCUL = "SC-UL"
RAUL = "RA-UL"
SCHEMES = (SCUL, RAUL)

EPS = 1e-8
MAX_ITER = 1000
DAMPING = 0.5
RETEST_ITERS = 5
MARGINAL = 1e-6


@dataclass(frozen=True)
class SolverReport:
    scheme: str
    stable: bool
    margin: float
    p_ra: Optional[float]
    p_aval: Optional[float]
    p_tx: Optional[float]
    p: Optional[float]
    x0: float
    phi: Optional[np.ndarray]
    metrics: Optional[qbd.QueueMetrics]
    iterations: int
    converged: bool
    trace: tuple = field(default=(), repr=False)

    @property
    def p_tx_or_p(self) -> float:
        return self.p_tx if self.scheme == SCUL else self.p

    @property
    def marginal(self) -> bool:
        """Stable, but so close to the boundary that the metrics are fragile."""
        return self.stable and self.margin < MARGINAL


@dataclass(frozen=True)
class FrontierPoint:
    alpha: float
    a_star: float


def _check_knobs(eps, max_iter, damping):
    if not eps > 0:
        raise DomainError("eps must be positive")
    if max_iter < 1:
        raise DomainError("max_iter must be at least 1")
    if not 0 < damping <= 1:
        raise DomainError("damping must lie in (0, 1]")


def _scul_probs(params: SystemParams, phi: np.ndarray):
    p_ra = ra_sr_success(params, float(phi[0]))
    p_aval = availability_prob(params, np.clip(phi[1:], 0.0, 1.0))
    return p_ra, p_aval


def solve_scul(params: SystemParams, eps: float = EPS, max_iter: int = MAX_ITER,
               damping: float = DAMPING, cold_start: bool = False,
               with_metrics: bool = True) -> SolverReport:
    """Scheduled uplink: iterate the phase occupancy of the RA/grant chain."""
    _check_knobs(eps, max_iter, damping)
    a = params.arrival
    n = params.n_slots
    p_tx = ea_tx_success(params)
    phi = np.zeros(n + 1) if cold_start else np.full(n + 1, a / (n + 1))
    trace = [phi.copy()]
    ss = pm = None
    p_ra = p_aval = margin = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p_ra, p_aval = _scul_probs(params, phi)
        pm = qbd.build_scul_phase_matrices(p_ra, p_aval, p_tx, n)
        nu = qbd.stationary_nu(p_ra, p_aval, n)
        margin = qbd.stability_margin(nu, a, pm)
        if margin <= 0:
            if it <= RETEST_ITERS:
                # a high starting guess can fake instability; back off toward empty
                phi = (1 - damping) * phi
                trace.append(phi.copy())
                continue
            return SolverReport(SCUL, False, margin, p_ra, p_aval, p_tx, None, 0.0, phi,
                                None, it, False, tuple(trace))
        blocks = qbd.assemble_qbd(a, pm)
        ss = qbd.steady_state(blocks, qbd.compute_R(blocks, method="logred"))
        new = np.clip((1 - damping) * phi + damping * ss.phi, 0.0, 1.0)
        trace.append(new.copy())
        step = float(np.max(np.abs(new - phi)))
        phi = new
        if step < eps:
            converged = True
            break
    metrics = _scul_metrics(ss, pm, params.tail_eps) if with_metrics and ss is not None else None
    x0 = ss.x0 if ss is not None else 0.0
    return SolverReport(SCUL, True, margin, p_ra, p_aval, p_tx, None, x0, phi, metrics,
                        it, converged, tuple(trace))


def _scul_metrics(ss: qbd.SteadyState, pm: qbd.PhaseMatrices, tail_eps: float) -> qbd.QueueMetrics:
    try:
        return qbd.waiting_time_scul(ss, pm, tail_eps)
    except TruncationError:
        # too close to critical for the PMF; the moments are still exact
        return qbd.closed_form_metrics(ss, pm)


def solve_raul(params: SystemParams, eps: float = EPS, max_iter: int = MAX_ITER,
               damping: float = DAMPING, cold_start: bool = False,
               with_metrics: bool = True) -> SolverReport:
    """Grant-free uplink: iterate the idle probability of the Geo/Geo/1 queue."""
    _check_knobs(eps, max_iter, damping)
    a = params.arrival
    x0 = 1.0 if cold_start else 1.0 - a
    trace = [x0]
    p = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = ra_ul_success(params, 1.0 - x0)
        margin = p - a
        if margin <= 0:
            if it <= RETEST_ITERS:
                x0 = (1 - damping) * x0 + damping
                trace.append(x0)
                continue
            return SolverReport(RAUL, False, margin, None, None, None, p, 0.0, None, None,
                                it, False, tuple(trace))
        new = min(1.0, max(0.0, (1 - damping) * x0 + damping * (p - a) / p))
        trace.append(new)
        step = abs(new - x0)
        x0 = new
        if step < eps:
            converged = True
            break
    margin = p - a
    metrics = None
    if with_metrics:
        chain = qbd.raul_chain(a, p, params.tail_eps)
        metrics = chain.metrics
    return SolverReport(RAUL, True, margin, None, None, None, p, x0, None, metrics,
                        it, converged, tuple(trace))


def solver_for(scheme: str) -> Callable[..., SolverReport]:
    if scheme == SCUL:
        return solve_scul
    if scheme == RAUL:
        return solve_raul
    raise DomainError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def _stable_at(params: SystemParams, scheme: str, a: float) -> bool:
    report = solver_for(scheme)(params.replace(arrival=a), with_metrics=False)
    return report.stable


def stability_threshold(params: SystemParams, scheme: str, a_tol: float = 1e-3) -> float:
    """Largest stable arrival rate, by bisection on the solver's verdict."""
    if not a_tol > 0:
        raise DomainError("a_tol must be positive")
    if not _stable_at(params, scheme, a_tol):
        return 0.0
    lo, hi = a_tol, 1.0
    while hi - lo > a_tol:
        mid = 0.5 * (lo + hi)
        if _stable_at(params, scheme, mid):
            lo = mid
        else:
            hi = mid
    return lo


def _frontier_task(args):
    params, scheme, alpha, a_tol = args
    return FrontierPoint(alpha, stability_threshold(params.with_alpha(alpha), scheme, a_tol))


def _map(fn, tasks, jobs):
    if jobs is None:
        jobs = default_jobs()
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def default_jobs() -> int:
    raw = os.environ.get("IOT_UPLINK_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise DomainError(f"IOT_UPLINK_JOBS must be an integer, got {raw!r}") from None


def pareto_frontier(params: SystemParams, scheme: str, alpha_grid: Sequence[float],
                    a_tol: float = 1e-3, jobs: Optional[int] = 1) -> list[FrontierPoint]:
    alpha_grid = [float(x) for x in alpha_grid]
    if any(b <= a for a, b in zip(alpha_grid, alpha_grid[1:])):
        raise DomainError("alpha_grid must be strictly increasing")
    if not a_tol > 0:
        raise DomainError("a_tol must be positive")
    solver_for(scheme)
    return _map(_frontier_task, [(params, scheme, al, a_tol) for al in alpha_grid], jobs)


def frontier_violations(points: Sequence[FrontierPoint], a_tol: float) -> list[int]:
    """Indices where a_star rises by more than ``a_tol`` as alpha grows."""
    return [i for i in range(1, len(points)) if points[i].a_star > points[i - 1].a_star + a_tol]


@dataclass(frozen=True)
class SweepRow:
    value: object
    report: Optional[SolverReport]
    error: Optional[str] = None


def _sweep_task(args):
    params, scheme, axis, value, eps, max_iter = args
    try:
        point = params.replace(**{axis: value})
        return SweepRow(value, solver_for(scheme)(point, eps=eps, max_iter=max_iter))
    except ModelError as exc:
        return SweepRow(value, None, f"{type(exc).__name__}: {exc}")


_SWEEP_AXES = {f for f in SystemParams.__dataclass_fields__} | {"alpha"}


def sweep(params: SystemParams, axis: str, values: Sequence, scheme: str = SCUL,
          eps: float = EPS, max_iter: int = MAX_ITER, jobs: Optional[int] = 1) -> list[SweepRow]:
    """One solve per value of ``axis``; rows keep the input order."""
    if axis not in _SWEEP_AXES:
        raise DomainError(f"unknown sweep axis {axis!r}")
    solver_for(scheme)
    tasks = [(params, scheme, axis, v, eps, max_iter) for v in values]
    return _map(_sweep_task, tasks, jobs)
