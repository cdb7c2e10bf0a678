"""
Batched dispatch loop.

Every ``batch_duration_s`` seconds (starting at the first request) the
engine admits newly posted requests, frees drivers whose rides have
ended, asks the controller for a deadhead limit and runs the matcher.
Batches with an empty queue are skipped and the clock fast-forwards to
the next arrival, so ``r_b`` counts arrivals up to the next logged batch.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .core import DEFAULT_MENU, Assignment, BatchRecord, Driver, LimitMenu, RideRequest
from .policy import Policy, greedy_match, make_policy

log = logging.getLogger(__name__)

MAX_BATCHES = 10**6


class SimulationError(RuntimeError):
    """Fatal engine condition. ``partial`` holds the logs up to the failure
    when the batch cap was hit."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True)
class SimConfig:
    batch_duration_s: float = 120.0
    speed_kmh: float = 30.0
    q_max: int = 240
    alpha: float = 0.75
    menu: LimitMenu = DEFAULT_MENU
    policy: str = "lara"
    seed: int = 0
    prior_weight: float = 10.0
    g_hat: Optional[tuple] = None  # frozen saving curve for lara
    escalate_on_stall: bool = True
    max_batches: int = MAX_BATCHES

    def __post_init__(self):
        if not self.batch_duration_s > 0:
            raise ValueError("batch_duration_s must be > 0")
        if not self.speed_kmh > 0:
            raise ValueError("speed_kmh must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.q_max > 0:
            raise ValueError("q_max must be > 0")
        if not isinstance(self.menu, LimitMenu):
            object.__setattr__(self, "menu", LimitMenu(self.menu))


@dataclass
class SimResult:
    batch_log: List[BatchRecord]
    assignment_log: List[Assignment]
    config: SimConfig
    input_digest: str
    controller: object = field(default=None, repr=False)

    @property
    def T_N(self) -> float:
        if not self.assignment_log:
            return 0.0
        first = min(a.assign_time for a in self.assignment_log)
        last = max(a.dropoff_time for a in self.assignment_log)
        return last - first

    @property
    def total_emission_g(self) -> float:
        return float(sum(a.emission_g for a in self.assignment_log))

    @property
    def total_wait_s(self) -> float:
        return float(sum(a.total_wait for a in self.assignment_log))


def input_digest(requests: Sequence[RideRequest], drivers: Sequence[Driver]) -> str:
    h = hashlib.sha256()
    for r in requests:
        h.update(struct.pack("<qddddd", r.id, r.request_time, r.pickup.lat, r.pickup.lon,
                             r.dropoff.lat, r.dropoff.lon))
    h.update(b"|")
    for d in drivers:
        h.update(struct.pack("<qdddd", d.id, d.unit_emission, d.location.lat, d.location.lon,
                             d.available_at))
    return h.hexdigest()


def waiting_time(a: Assignment) -> float:
    """Queue wait plus pickup travel."""
    return a.pickup_time - a.request_time


def run(requests: Sequence[RideRequest], drivers: Sequence[Driver], cfg: SimConfig,
        policy: Optional[Policy] = None) -> SimResult:
    if not drivers:
        raise SimulationError("empty fleet: at least one driver is required")
    if not requests:
        raise SimulationError("no requests to simulate")
    times = np.array([r.request_time for r in requests], dtype=float)
    if np.any(np.diff(times) < 0):
        raise SimulationError("requests must be ordered by request_time")
    if policy is None:
        policy = make_policy(cfg.policy, q_max=cfg.q_max, alpha=cfg.alpha, menu=cfg.menu,
                             g_hat=cfg.g_hat, prior_weight=cfg.prior_weight, seed=cfg.seed)
    ctrl = policy.controller

    # request arrays in FIFO order (time, then id)
    order = sorted(range(len(requests)), key=lambda k: (requests[k].request_time, requests[k].id))
    reqs = [requests[k] for k in order]
    r_time = np.array([r.request_time for r in reqs])
    r_lat = np.array([r.pickup.lat for r in reqs])
    r_lon = np.array([r.pickup.lon for r in reqs])
    r_dlat = np.array([r.dropoff.lat for r in reqs])
    r_dlon = np.array([r.dropoff.lon for r in reqs])
    r_trip = np.array([r.trip_distance for r in reqs])

    # driver arrays sorted by id; ties in the matchers resolve to lower id
    fleet = sorted(drivers, key=lambda d: d.id)
    f_id = np.array([d.id for d in fleet])
    f_em = np.array([d.unit_emission for d in fleet])
    f_lat = np.array([d.location.lat for d in fleet])
    f_lon = np.array([d.location.lon for d in fleet])
    f_free = np.array([d.available_at for d in fleet])

    dur = float(cfg.batch_duration_s)
    speed = float(cfg.speed_kmh)
    t0 = float(r_time[0])
    n_total = len(reqs)

    queue = np.empty(0, dtype=np.int64)  # indices into reqs, FIFO
    admitted = 0
    step = 0
    batches: List[BatchRecord] = []
    arrivals_at: List[int] = []
    assignments: List[Assignment] = []
    n_assigned = 0

    while n_assigned < n_total:
        t = t0 + step * dur
        hi = int(np.searchsorted(r_time, t, side="right"))
        new = hi - admitted
        if new:
            queue = np.concatenate([queue, np.arange(admitted, hi)])
            admitted = hi
        if len(queue) == 0:
            # fast-forward to the boundary admitting the next arrival
            step = max(step + 1, int(math.ceil((r_time[admitted] - t0) / dur)))
            continue
        if len(batches) >= cfg.max_batches:
            arrivals_at.append(0)
            partial = SimResult([replace(rec, r_b=r) for rec, r in zip(batches, arrivals_at)],
                                assignments, cfg, input_digest(requests, drivers), controller=ctrl)
            raise SimulationError(
                f"no termination after {cfg.max_batches} batches; "
                f"{n_total - n_assigned} requests still unassigned", partial)
        if batches:
            arrivals_at.append(new)
        b = len(batches)
        avail = np.flatnonzero(f_free <= t)
        N_b = len(queue)
        d_tb = float(r_trip[queue].mean())
        limit = ctrl.choose(N_b, d_tb)

        ri, di, dh, ne = greedy_match(
            r_lat[queue], r_lon[queue], r_trip[queue],
            f_lat[avail], f_lon[avail], f_em[avail],
            limit=limit, key=policy.key,
        )
        escalated = False
        if cfg.escalate_on_stall and len(ri) == 0 and len(avail) and math.isfinite(limit):
            # stall: drivers idle, requests waiting, nobody within the limit
            for wider in [d for d in cfg.menu if d > limit] + [math.inf]:
                ri, di, dh, ne = greedy_match(
                    r_lat[queue], r_lon[queue], r_trip[queue],
                    f_lat[avail], f_lon[avail], f_em[avail],
                    limit=wider, key=policy.key,
                )
                if len(ri):
                    limit, escalated = wider, True
                    break
        if len(ri):
            q_idx = queue[ri]
            drv = avail[di]
            trip = r_trip[q_idx]
            e = f_em[drv]
            emission = e * (dh + trip)
            pickup = t + dh / speed * 3600.0
            dropoff = pickup + trip / speed * 3600.0
            for k in range(len(ri)):
                qi, dj = int(q_idx[k]), int(drv[k])
                assignments.append(Assignment(
                    request_id=reqs[qi].id, driver_id=int(f_id[dj]), batch_index=b,
                    deadhead_km=float(dh[k]), trip_km=float(trip[k]),
                    unit_emission=float(e[k]), emission_g=float(emission[k]),
                    request_time=float(r_time[qi]), assign_time=t,
                    pickup_time=float(pickup[k]), dropoff_time=float(dropoff[k]),
                    nearest_driver_emission_g=float(ne[k]),
                ))
            f_free[drv] = dropoff
            f_lat[drv] = r_dlat[q_idx]
            f_lon[drv] = r_dlon[q_idx]
            keep = np.ones(len(queue), dtype=bool)
            keep[ri] = False
            queue = queue[keep]
            n_assigned += len(ri)
            if math.isfinite(limit):
                ctrl.observe(limit, ne - emission)

        batches.append(BatchRecord(
            b=b, time=t, N_b=N_b, M_b=len(avail), chosen_limit=float(limit),
            n_b=len(ri), r_b=0, d_tb=d_tb, Q_b=cfg.q_max - N_b, escalated=escalated,
        ))
        step += 1

    # r_b: arrivals admitted at the next logged batch (none after the last)
    arrivals_at.append(0)
    batches = [replace(rec, r_b=r) for rec, r in zip(batches, arrivals_at)]
    log.debug("simulated %d batches, %d assignments", len(batches), len(assignments))
    return SimResult(batches, assignments, cfg, input_digest(requests, drivers), controller=ctrl)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

BATCH_HEADER = ["b", "N_b", "M_b", "chosen_d", "n_b", "r_b", "d_tb", "Q_b"]
ASSIGNMENT_HEADER = ["request_id", "driver_id", "b", "deadhead_km", "trip_km", "emission_g",
                     "queue_wait_s", "total_wait_s", "nearest_emission_g"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_batch_csv(result: SimResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BATCH_HEADER)
        for r in result.batch_log:
            chosen = "" if r.chosen_limit is None else ("inf" if math.isinf(r.chosen_limit) else f"{r.chosen_limit:g}")
            w.writerow([r.b, r.N_b, r.M_b, chosen, r.n_b, r.r_b, _fmt(r.d_tb), r.Q_b])


def write_assignment_csv(result: SimResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ASSIGNMENT_HEADER)
        for a in result.assignment_log:
            w.writerow([a.request_id, a.driver_id, a.batch_index, _fmt(a.deadhead_km), _fmt(a.trip_km),
                        _fmt(a.emission_g), _fmt(a.queue_wait), _fmt(a.total_wait),
                        _fmt(a.nearest_driver_emission_g)])


def replay_queue(batch_log: Sequence[BatchRecord], q_max: int) -> List[int]:
    """Rebuild Q(b) from Q(1) = q_max - N_1 via Q(b+1) = Q(b) - r_b + a_b * n_b."""
    if not batch_log:
        return []
    q = [q_max - batch_log[0].N_b]
    for rec in batch_log[:-1]:
        selected = 1 if rec.chosen_limit is not None else 0
        q.append(q[-1] - rec.r_b + selected * rec.n_b)
    return q
