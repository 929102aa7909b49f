"""Slot-level Monte Carlo of the uplink on a fixed PPP realization.

All powers are normalised by the target received power, so a device's own
signal at its serving BS is just its fading gain and the noise is
``noise / rho``.  Device state lives in flat numpy arrays; the slot loop is
sequential, the SINR evaluation inside a slot is vectorised over devices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateRealizationError, DomainError, ModelError
from .solver import RAUL, SCUL, SCHEMES, SolverReport
from .spatial import Pmf, SystemParams

REGION_HALF_WIDTH = 5.0
OBSERVE_RADIUS = 1.0
MIN_GUARD = 4.0
BUFFER_CAP = 10_000
N_BATCHES = 20
STABLE_WINDOW = 200
STABLE_RTOL = 0.05

IDLE, RA = 0, 1  # phases; scheduled slot k of N is phase 1 + k


@dataclass(frozen=True)
class NetworkRealization:
    bs_points: np.ndarray
    device_points: np.ndarray
    association: np.ndarray
    service_distance: np.ndarray
    tx_power: np.ndarray
    observed: np.ndarray
    eta: float
    rho: float

    @classmethod
    def from_points(cls, bs_points, device_points, eta: float, rho: float,
                    observe_radius: float = OBSERVE_RADIUS) -> "NetworkRealization":
        bs = np.asarray(bs_points, dtype=float).reshape(-1, 2)
        dev = np.asarray(device_points, dtype=float).reshape(-1, 2)
        if len(bs) == 0:
            raise DegenerateRealizationError("realization contains no base station")
        if len(dev):
            dist, assoc = cKDTree(bs).query(dev)
        else:
            dist, assoc = np.zeros(0), np.zeros(0, dtype=int)
        if (dist == 0).any():
            raise DegenerateRealizationError("a device coincides with a base station")
        observed = np.hypot(dev[:, 0], dev[:, 1]) <= observe_radius
        return cls(bs, dev, np.asarray(assoc, dtype=int), dist, rho * dist ** eta,
                   observed, eta, rho)

    @property
    def n_bs(self) -> int:
        return len(self.bs_points)

    @property
    def n_devices(self) -> int:
        return len(self.device_points)

    def path_gain(self) -> np.ndarray:
        """Mean received power at every BS relative to the target, shape (BS, device)."""
        d = np.hypot(self.bs_points[:, None, 0] - self.device_points[None, :, 0],
                     self.bs_points[:, None, 1] - self.device_points[None, :, 1])
        with np.errstate(divide="ignore"):
            return (self.service_distance[None, :] / d) ** self.eta


def realize_network(params: SystemParams, region_half_width: float = REGION_HALF_WIDTH,
                    seed: int = 0, observe_radius: float = OBSERVE_RADIUS) -> NetworkRealization:
    """Independent PPPs of BSs and devices on a square centred at the origin."""
    if region_half_width - observe_radius < MIN_GUARD:
        raise DomainError(f"guard ring must be at least {MIN_GUARD} km")
    rng = np.random.default_rng(seed)
    side = 2 * region_half_width
    area = side * side
    n_bs = rng.poisson(params.bs_intensity * area)
    n_dev = rng.poisson(params.device_intensity * area)
    bs = rng.uniform(-region_half_width, region_half_width, size=(n_bs, 2))
    dev = rng.uniform(-region_half_width, region_half_width, size=(n_dev, 2))
    net = NetworkRealization.from_points(bs, dev, params.eta, params.rho, observe_radius)
    # an observed device whose nearest BS is farther than the region edge could
    # have a nearer BS outside the sampled window
    edge = region_half_width - np.max(np.abs(dev[net.observed]), axis=1) if net.observed.any() else np.zeros(0)
    if (net.service_distance[net.observed] > edge).any():
        raise DegenerateRealizationError("an observed device may be served from outside the region")
    return net


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    count: int


@dataclass(frozen=True)
class SimStats:
    scheme: str
    p_ra_hat: Optional[Estimate]
    p_aval_hat: Optional[Estimate]
    p_tx_hat: Optional[Estimate]
    p_hat: Optional[Estimate]
    mean_queue_hat: Optional[Estimate]
    wait_pmf_hat: Optional[Pmf]
    wait_mean_hat: Optional[Estimate]
    dispersion_hat: Optional[float]
    overflow_count: int
    slots: int
    warmup: int
    stationary: bool
    # per-batch raw counts, kept so replications can be pooled
    batches: Mapping[str, np.ndarray] = field(default_factory=dict, repr=False)
    waits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int), repr=False)


def _ratio_estimate(num: np.ndarray, den: np.ndarray) -> Optional[Estimate]:
    total = float(den.sum())
    if total == 0:
        return None
    value = float(num.sum()) / total
    ok = den > 0
    if ok.sum() >= 2:
        # ratio estimator with batch-means variance
        resid = num[ok] - value * den[ok]
        k = ok.sum()
        se = float(np.sqrt(k / (k - 1) * np.sum(resid ** 2)) / total)
    else:
        se = float(np.sqrt(value * (1 - value) / total))
    return Estimate(value, se, int(total))


def _wait_stats(waits: np.ndarray):
    if len(waits) == 0:
        return Pmf(np.array([1.0]), 0.0), Estimate(0.0, 0.0, 0), 0.0
    counts = np.bincount(waits)
    pmf = Pmf(counts / counts.sum(), 0.0)
    mean = float(waits.mean())
    var = float(waits.var())
    se = float(waits.std(ddof=1) / np.sqrt(len(waits))) if len(waits) > 1 else 0.0
    return pmf, Estimate(mean, se, len(waits)), (var / mean if mean > 0 else 0.0)


def _build_stats(scheme, batches, waits, overflow, slots, warmup, stationary) -> SimStats:
    def est(name):
        return _ratio_estimate(batches[f"{name}_succ"], batches[f"{name}_att"]) if f"{name}_att" in batches else None

    if "queue_sum" in batches:
        mq = _ratio_estimate(batches["queue_sum"], batches["queue_n"]) or Estimate(0.0, 0.0, 0)
        pmf, wmean, disp = _wait_stats(waits)
    else:
        mq = pmf = wmean = disp = None
    return SimStats(scheme, est("ra"), est("aval"), est("tx"), est("ul"), mq, pmf, wmean, disp,
                    overflow, slots, warmup, stationary, dict(batches), waits)


def aggregate(stats: list[SimStats]) -> SimStats:
    """Pool replications of the same scheme and parameters."""
    if not stats:
        raise DomainError("nothing to aggregate")
    scheme = stats[0].scheme
    if any(s.scheme != scheme for s in stats):
        raise DomainError("cannot pool different schemes")
    keys = stats[0].batches.keys()
    batches = {k: np.concatenate([s.batches[k] for s in stats]) for k in keys}
    waits = np.concatenate([s.waits for s in stats])
    return _build_stats(scheme, batches, waits, sum(s.overflow_count for s in stats),
                        sum(s.slots for s in stats), max(s.warmup for s in stats),
                        all(s.stationary for s in stats))


def capture_round(gain: np.ndarray, serving: np.ndarray, tx: np.ndarray, channel: np.ndarray,
                  theta: float, noise_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Success mask for devices ``tx`` contending on ``channel`` under max-SINR capture.

    Every transmitter interferes at every BS on its channel.  At each (BS,
    channel) only the strongest own-cell signal can be decoded, and only if
    its SINR clears ``theta``.
    """
    n = len(tx)
    if n == 0:
        return np.zeros(0, dtype=bool)
    power = gain[:, tx] * rng.exponential(size=(gain.shape[0], n))
    order = np.argsort(channel, kind="stable")
    ch_sorted = channel[order]
    starts = np.flatnonzero(np.r_[True, ch_sorted[1:] != ch_sorted[:-1]])
    totals = np.add.reduceat(power[:, order], starts, axis=1)
    col = np.empty(n, dtype=int)
    col[order] = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, n]))
    own_bs = serving[tx]
    signal = power[own_bs, np.arange(n)]
    interference = totals[own_bs, col] - signal
    sinr = signal / (noise_ratio + np.maximum(interference, 0.0))
    # strongest own-cell signal per (BS, channel)
    group = own_bs.astype(np.int64) * (int(channel.max()) + 1) + channel
    idx = np.lexsort((signal, group))
    last = np.r_[group[idx][1:] != group[idx][:-1], True]
    winner = np.zeros(n, dtype=bool)
    winner[idx[last]] = True
    return winner & (sinr > theta)


class _Recorder:
    """Batch counters over the measured slots, restricted to observed devices."""

    def __init__(self, names, n_slots, n_batches):
        self.n_batches = max(1, min(n_batches, n_slots))
        self.edges = np.linspace(0, n_slots, self.n_batches + 1).astype(int)
        self.data = {k: np.zeros(self.n_batches) for k in names}

    def batch(self, t_measured):
        return int(np.searchsorted(self.edges, t_measured, side="right") - 1)

    def add(self, b, **counts):
        for k, v in counts.items():
            self.data[k][b] += v


def _stabilized(history: list[float]) -> bool:
    if len(history) < 2 * STABLE_WINDOW:
        return False
    prev = np.mean(history[-2 * STABLE_WINDOW:-STABLE_WINDOW])
    last = np.mean(history[-STABLE_WINDOW:])
    scale = max(abs(prev), abs(last))
    return scale < 1e-12 or abs(last - prev) <= STABLE_RTOL * scale


def run_sim(net: NetworkRealization, params: SystemParams, scheme: str, slots: int,
            warmup: int = 1000, seed: int = 0, tx_interference: str = "saturated",
            audit: bool = False, n_batches: int = N_BATCHES) -> SimStats:
    """Simulate ``slots`` slots; statistics use the slots after the warmup.

    ``tx_interference`` selects the intercell interference seen by scheduled
    transmissions: ``saturated`` puts one device of every other cell on each
    block (a scheduled one if present, otherwise a random member of the
    cell); ``scheduled`` uses only devices that actually hold a grant.
    ``audit`` checks the per-slot invariants and raises on a violation.
    """
    if scheme not in SCHEMES:
        raise DomainError(f"unknown scheme {scheme!r}")
    if not slots > warmup >= 0:
        raise DomainError("need slots > warmup >= 0")
    if tx_interference not in ("saturated", "scheduled"):
        raise DomainError(f"unknown tx_interference {tx_interference!r}")
    rng = np.random.default_rng(seed)
    gain = net.path_gain()
    serving = net.association
    n_dev, n_bs = net.n_devices, net.n_bs
    nr = params.noise_ratio
    a = params.arrival
    N = params.n_slots
    obs = net.observed

    queue = np.zeros(n_dev, dtype=np.int64)
    phase = np.zeros(n_dev, dtype=np.int64)
    overflow = 0

    members = np.argsort(serving, kind="stable")
    cell_size = np.bincount(serving, minlength=n_bs)
    cell_start = np.r_[0, np.cumsum(cell_size)[:-1]]

    arr_dev, arr_t, dep_dev, dep_t = [], [], [], []
    history = []
    measure_from = None
    names = ["queue_sum", "queue_n"] + (
        ["ra_succ", "ra_att", "aval_succ", "aval_att", "tx_succ", "tx_att"] if scheme == SCUL
        else ["ul_succ", "ul_att"])
    rec = None

    for t in range(slots):
        start_queue = queue.copy() if audit else None
        if measure_from is None and t >= warmup and (_stabilized(history) or t >= (slots + warmup) // 2):
            measure_from = t
            rec = _Recorder(names, slots - t, n_batches)
        b = rec.batch(t - measure_from) if rec is not None else None
        if b is not None:
            rec.add(b, queue_sum=float(np.maximum(queue[obs] - 1, 0).sum()), queue_n=float(obs.sum()))
        history.append(float(queue[obs].mean()) if obs.any() else 0.0)

        departed = np.zeros(n_dev, dtype=bool)
        if scheme == RAUL:
            tx = np.flatnonzero(queue > 0)
            ch = rng.integers(params.n_chan, size=len(tx))
            ok = capture_round(gain, serving, tx, ch, params.theta_ul, nr, rng)
            if audit:
                _audit_unique(serving[tx[ok]], ch[ok], "grant-free success")
            departed[tx[ok]] = True
            if b is not None:
                o = obs[tx]
                rec.add(b, ul_succ=float(ok[o].sum()), ul_att=float(o.sum()))
        else:
            # scheduled transmissions on exclusive, re-randomised blocks
            sched = np.flatnonzero(phase > RA)
            ok_tx = _scheduled_round(gain, serving, sched, params, nr, rng, members, cell_size,
                                     cell_start, tx_interference, audit)
            departed[sched[ok_tx]] = True
            # scheduling requests
            req = np.flatnonzero(phase == RA)
            code = rng.integers(params.n_zc, size=len(req))
            ok_sr = capture_round(gain, serving, req, code, params.theta_sr, nr, rng)
            if audit:
                _audit_unique(serving[req[ok_sr]], code[ok_sr], "request success")
            winners = req[ok_sr]
            if b is not None:
                o = obs[sched]
                rec.add(b, tx_succ=float(ok_tx[o].sum()), tx_att=float(o.sum()))
                o = obs[req]
                rec.add(b, ra_succ=float(ok_sr[o].sum()), ra_att=float(o.sum()))

        arrivals = rng.random(n_dev) < a
        full = arrivals & (queue - departed >= BUFFER_CAP)
        overflow += int((full & obs).sum()) if measure_from is not None else 0
        arrivals &= ~full
        queue += arrivals.astype(np.int64) - departed.astype(np.int64)
        if audit and (queue != start_queue + arrivals - departed).any():
            raise ModelError("queue conservation violated")

        if scheme == SCUL:
            granted = np.zeros(0, dtype=np.int64)
            if len(winners):
                # blocks held next slot by devices that stay scheduled and non-empty
                cont = sched[(phase[sched] - 1 < N) & (queue[sched] > 0)]
                free = params.q_blocks - np.bincount(serving[cont], minlength=n_bs)
                # random order among the winners of each cell, first `free` get blocks
                perm = rng.permutation(len(winners))
                w = winners[perm]
                cell = serving[w]
                idx = np.lexsort((np.arange(len(w)), cell))
                w, cell = w[idx], cell[idx]
                first = np.r_[True, cell[1:] != cell[:-1]]
                rank = np.arange(len(w)) - np.maximum.accumulate(np.where(first, np.arange(len(w)), 0))
                granted = w[rank < free[cell]]
                if b is not None:
                    o = obs[winners]
                    rec.add(b, aval_succ=float(obs[granted].sum()), aval_att=float(o.sum()))
            # phase transitions; the slot after the last grant slot returns to RA
            nxt = phase.copy()
            in_tx = phase > RA
            nxt[in_tx] = np.where(phase[in_tx] - 1 < N, phase[in_tx] + 1, RA)
            nxt[granted] = RA + 1
            nxt[(phase == IDLE) & (queue > 0)] = RA
            nxt[queue == 0] = IDLE
            phase = nxt
            if audit:
                held = np.bincount(serving[phase > RA], minlength=n_bs)
                if (held > params.q_blocks).any():
                    raise ModelError("more grants than blocks in a cell")
                if ((phase == IDLE) != (queue == 0)).any():
                    raise ModelError("idle phase out of step with an empty buffer")
        sel = arrivals & obs
        arr_dev.append(np.flatnonzero(sel))
        arr_t.append(np.full(int(sel.sum()), t))
        sel = departed & obs
        dep_dev.append(np.flatnonzero(sel))
        dep_t.append(np.full(int(sel.sum()), t))

    if rec is None:
        raise DomainError("no measured slots; increase slots")
    waits = _waits(np.concatenate(arr_dev), np.concatenate(arr_t),
                   np.concatenate(dep_dev), np.concatenate(dep_t), measure_from)
    return _build_stats(scheme, rec.data, waits, overflow, slots - measure_from, measure_from,
                        _stabilized(history))


def _audit_unique(bs, channel, what):
    if len(bs) and len(np.unique(np.stack([bs, channel]), axis=1)[0]) != len(bs):
        raise ModelError(f"more than one {what} on a (BS, channel) pair")


def _scheduled_round(gain, serving, sched, params, nr, rng, members, cell_size, cell_start,
                     mode, audit):
    n_bs = gain.shape[0]
    q = params.q_blocks
    n = len(sched)
    if n == 0:
        return np.zeros(0, dtype=bool)
    # each cell draws distinct blocks for its scheduled devices
    cell = serving[sched]
    order = np.lexsort((rng.random(n), cell))
    s_sorted, c_sorted = sched[order], cell[order]
    first = np.r_[True, c_sorted[1:] != c_sorted[:-1]]
    rank = np.arange(n) - np.maximum.accumulate(np.where(first, np.arange(n), 0))
    perms = np.argsort(rng.random((n_bs, q)), axis=1)
    block_sorted = perms[c_sorted, rank]
    block = np.empty(n, dtype=np.int64)
    block[order] = block_sorted
    occupant = np.full((n_bs, q), -1, dtype=np.int64)
    occupant[cell, block] = sched
    if audit and (occupant[cell, block] != sched).any():
        raise ModelError("two scheduled devices share a block")
    if mode == "saturated":
        pick = cell_start[:, None] + (rng.random((n_bs, q)) * cell_size[:, None]).astype(np.int64)
        background = np.where(cell_size[:, None] > 0, members[np.minimum(pick, len(members) - 1)], -1)
        occupant = np.where(occupant >= 0, occupant, background)
    # interference at each scheduled device's BS from the other cells' occupants of its block
    others = occupant[:, block].T  # (n, n_bs): occupant of that block in every cell
    valid = others >= 0
    valid[np.arange(n), cell] = False
    g = np.where(valid, gain[cell[:, None], np.maximum(others, 0)], 0.0)
    interference = (g * rng.exponential(size=g.shape)).sum(axis=1)
    signal = rng.exponential(size=n)
    return signal / (nr + interference) > params.theta_tx


def _waits(arr_dev, arr_t, dep_dev, dep_t, measure_from):
    """Per-packet delay until the packet ahead has left; zero if it found the buffer empty.

    Buffers start empty and are FIFO, so the k-th arrival of a device is its
    k-th departure.  Only packets arriving after ``measure_from`` are kept.
    """
    waits = []
    a_order = np.lexsort((arr_t, arr_dev))
    d_order = np.lexsort((dep_t, dep_dev))
    arr_dev, arr_t = arr_dev[a_order], arr_t[a_order]
    dep_dev, dep_t = dep_dev[d_order], dep_t[d_order]
    a_split = np.flatnonzero(np.diff(arr_dev)) + 1
    d_keys = {}
    if len(dep_dev):
        d_split = np.flatnonzero(np.diff(dep_dev)) + 1
        for chunk_dev, chunk_t in zip(np.split(dep_dev, d_split), np.split(dep_t, d_split)):
            d_keys[int(chunk_dev[0])] = chunk_t
    for chunk_dev, chunk_t in zip(np.split(arr_dev, a_split), np.split(arr_t, a_split)):
        if len(chunk_dev) == 0:
            continue
        deps = d_keys.get(int(chunk_dev[0]), np.zeros(0, dtype=int))
        k = min(len(chunk_t) - 1, len(deps))
        w = np.zeros(len(chunk_t), dtype=np.int64)
        if k > 0:
            w[1:k + 1] = np.maximum(deps[:k] - chunk_t[1:k + 1] + 1, 0)
        # packets whose predecessor had not left by the end are censored
        waits.append(w[:k + 1][chunk_t[:k + 1] >= measure_from])
    return np.concatenate(waits) if waits else np.zeros(0, dtype=np.int64)


def snapshot_sim(net: NetworkRealization, params: SystemParams, report: SolverReport, slots: int,
                 seed: int = 0, n_batches: int = N_BATCHES) -> SimStats:
    """Success probabilities with device states drawn from the analytic steady state.

    Each slot every device independently takes the idle / request / grant-slot
    state with the probabilities in ``report``, so only the spatial part of the
    model is exercised.  No queue metrics are produced.
    """
    if not report.stable:
        raise DomainError("snapshot needs a stable analytic report")
    rng = np.random.default_rng(seed)
    gain = net.path_gain()
    serving = net.association
    n_dev, n_bs = net.n_devices, net.n_bs
    nr = params.noise_ratio
    obs = net.observed
    members = np.argsort(serving, kind="stable")
    cell_size = np.bincount(serving, minlength=n_bs)
    cell_start = np.r_[0, np.cumsum(cell_size)[:-1]]
    if report.scheme == SCUL:
        probs = np.r_[report.x0, report.phi]
        probs = probs / probs.sum()
        names = ["ra_succ", "ra_att", "tx_succ", "tx_att"]
    else:
        names = ["ul_succ", "ul_att"]
    rec = _Recorder(names, slots, n_batches)
    for t in range(slots):
        b = rec.batch(t)
        if report.scheme == RAUL:
            tx = np.flatnonzero(rng.random(n_dev) >= report.x0)
            ch = rng.integers(params.n_chan, size=len(tx))
            ok = capture_round(gain, serving, tx, ch, params.theta_ul, nr, rng)
            o = obs[tx]
            rec.add(b, ul_succ=float(ok[o].sum()), ul_att=float(o.sum()))
            continue
        state = rng.choice(len(probs), size=n_dev, p=probs)
        # at most q scheduled devices per cell; the excess is dropped at random
        sched = np.flatnonzero(state >= 2)
        order = np.lexsort((rng.random(len(sched)), serving[sched]))
        sched = sched[order]
        cell = serving[sched]
        first = np.r_[True, cell[1:] != cell[:-1]] if len(cell) else np.zeros(0, bool)
        rank = np.arange(len(sched)) - np.maximum.accumulate(np.where(first, np.arange(len(sched)), 0))
        sched = sched[rank < params.q_blocks]
        ok_tx = _scheduled_round(gain, serving, sched, params, nr, rng, members, cell_size,
                                 cell_start, "saturated", False)
        req = np.flatnonzero(state == 1)
        code = rng.integers(params.n_zc, size=len(req))
        ok_sr = capture_round(gain, serving, req, code, params.theta_sr, nr, rng)
        o = obs[sched]
        rec.add(b, tx_succ=float(ok_tx[o].sum()), tx_att=float(o.sum()))
        o = obs[req]
        rec.add(b, ra_succ=float(ok_sr[o].sum()), ra_att=float(o.sum()))
    return _build_stats(report.scheme, rec.data, np.zeros(0, dtype=np.int64), 0, slots, 0, True)


def _replication(args):
    params, scheme, slots, warmup, seed, region, tx_interference = args
    # network and dynamics draw from independent streams of the same seed
    net_seed, run_seed = np.random.SeedSequence(seed).spawn(2)
    net = realize_network(params, region, seed=net_seed)
    return run_sim(net, params, scheme, slots, warmup, seed=run_seed,
                   tx_interference=tx_interference)


def simulate(params: SystemParams, scheme: str, slots: int, warmup: int = 1000,
             seeds=(0,), region_half_width: float = REGION_HALF_WIDTH,
             tx_interference: str = "saturated", jobs: int = 1) -> SimStats:
    """Independent replications, one fresh realization per seed, pooled."""
    tasks = [(params, scheme, slots, warmup, int(s), region_half_width, tx_interference) for s in seeds]
    if jobs <= 1 or len(tasks) <= 1:
        results = [_replication(t) for t in tasks]
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replication, tasks))
    return aggregate(results)


@dataclass(frozen=True)
class MetricGap:
    name: str
    simulated: float
    se: float
    analytic: float
    gap: float
    z: float
    tolerance: Optional[float]

    @property
    def passed(self) -> bool:
        return self.tolerance is None or self.gap < self.tolerance


@dataclass(frozen=True)
class Discrepancy:
    scheme: str
    gaps: tuple

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.gaps)


DEFAULT_TOLERANCES = {"p_tx": 0.03, "p": 0.03, "p_ra": 0.05}


def compare_to_analysis(stats: SimStats, report: SolverReport,
                        tolerances: Optional[Mapping[str, float]] = None) -> Discrepancy:
    """Absolute gaps and z-scores of every estimate that has an analytic counterpart.

    Metrics without an entry in ``tolerances`` are reported but never fail.
    """
    if stats.scheme != report.scheme:
        raise DomainError("simulation and analysis use different schemes")
    tol = DEFAULT_TOLERANCES if tolerances is None else dict(tolerances)
    pairs = [("p_ra", stats.p_ra_hat, report.p_ra), ("p_aval", stats.p_aval_hat, report.p_aval),
             ("p_tx", stats.p_tx_hat, report.p_tx), ("p", stats.p_hat, report.p)]
    if report.metrics is not None and stats.mean_queue_hat is not None:
        pairs += [("mean_queue", stats.mean_queue_hat, report.metrics.mean_queue_len),
                  ("wait_mean", stats.wait_mean_hat, report.metrics.wait_mean)]
    gaps = []
    for name, est, ref in pairs:
        if est is None or ref is None:
            continue
        gap = abs(est.value - ref)
        z = gap / est.se if est.se > 0 else (0.0 if gap == 0 else float("inf"))
        gaps.append(MetricGap(name, est.value, est.se, float(ref), gap, z, tol.get(name)))
    return Discrepancy(report.scheme, tuple(gaps))
