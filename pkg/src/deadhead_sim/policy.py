"""
Deadhead-limit controllers, within-batch matchers and the online
estimate of the normalized emission-saving curve.

Controllers pick one limit per batch. Matchers walk the queue in FIFO
order and hand each request one available driver, removing that driver
for the rest of the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scipy.spatial import cKDTree

from .core import EARTH_RADIUS_KM, Assignment, Driver, LimitMenu, RideRequest, haversine_km


def log_prior(menu: LimitMenu) -> Tuple[float, ...]:
    """Normalized base-2 log curve: 0 at d_min, 1 at d_max."""
    if len(menu) == 1:
        return (1.0,)
    span = math.log2(menu.d_max / menu.d_min)
    return tuple(math.log2(d / menu.d_min) / span for d in menu)


# ---------------------------------------------------------------------------
# Controller state and the per-batch limit choice
# ---------------------------------------------------------------------------

@dataclass
class ControllerState:
    q_max: int
    alpha: float
    menu: LimitMenu
    g_hat: Tuple[float, ...]
    score_evaluations: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.q_max > 0:
            raise ValueError(f"q_max must be positive, got {self.q_max}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if len(self.menu) == 0:
            raise ValueError("empty limit menu")
        self.g_hat = tuple(float(g) for g in self.g_hat)
        if len(self.g_hat) != len(self.menu):
            raise ValueError("g_hat must have one entry per menu limit")
        if any(not 0.0 <= g <= 1.0 for g in self.g_hat):
            raise ValueError(f"g_hat values must lie in [0, 1]: {self.g_hat}")
        if len(self.menu) > 1 and (abs(self.g_hat[0]) > 1e-12 or abs(self.g_hat[-1] - 1.0) > 1e-12):
            raise ValueError("g_hat must be pinned to 0 at d_min and 1 at d_max")


def limit_score(q_max, alpha, g, d, queue_len, mean_trip_km) -> float:
    slack = q_max - queue_len
    return (q_max * (1.0 - alpha + alpha * g) - slack) / (d + mean_trip_km)


def select_limit(state: ControllerState, queue_len: int, mean_trip_km: float) -> float:
    """Return the menu limit maximizing the drift-plus-penalty ratio.

    Ties go to the smaller limit. Exactly ``len(menu)`` scores are
    evaluated per call.
    """
    if len(state.menu) == 0:
        raise ValueError("empty limit menu")
    if not mean_trip_km > 0:
        raise ValueError(f"mean_trip_km must be > 0, got {mean_trip_km}")
    best_d, best = None, -math.inf
    for d, g in zip(state.menu, state.g_hat):
        s = limit_score(state.q_max, state.alpha, g, d, queue_len, mean_trip_km)
        state.score_evaluations += 1
        if s > best:
            best_d, best = d, s
    return best_d


# ---------------------------------------------------------------------------
# Monte Carlo estimate of the saving curve
# ---------------------------------------------------------------------------

@dataclass
class EstimatorTable:
    menu: LimitMenu
    prior_weight: float = 10.0
    counts: List[int] = field(default=None)
    means: List[float] = field(default=None)
    converged: bool = True

    def __post_init__(self):
        n = len(self.menu)
        if self.counts is None:
            self.counts = [0] * n
        if self.means is None:
            self.means = [0.0] * n
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be >= 0")

    @property
    def prior_curve(self) -> Tuple[float, ...]:
        return log_prior(self.menu)


def record_saving(table: EstimatorTable, limit: float, saving_g: float) -> EstimatorTable:
    """Fold one observed saving (nearest-driver emission minus realized
    emission) into the running mean of the bucket for ``limit``."""
    if limit not in table.menu:
        raise ValueError(f"limit {limit} is not in the menu {table.menu.limits}")
    i = table.menu.index(limit)
    table.counts[i] += 1
    table.means[i] += (float(saving_g) - table.means[i]) / table.counts[i]
    return table


def record_savings(table: EstimatorTable, limit: float, savings) -> EstimatorTable:
    """Batch form of :func:`record_saving`, same arithmetic."""
    for s in savings:
        record_saving(table, limit, s)
    return table


def normalized_g_hat(table: EstimatorTable) -> Tuple[float, ...]:
    prior = table.prior_curve
    n = len(table.menu)
    if n == 1:
        return (1.0,)
    raw = [m if c > 0 else 0.0 for m, c in zip(table.means, table.counts)]
    scale = raw[-1] - raw[0]
    if not any(table.counts) or scale <= 0:
        scale = 1.0
    w = table.prior_weight
    post = []
    for p, c, m in zip(prior, table.counts, table.means):
        if w + c == 0:
            post.append(p * scale)
        else:
            post.append((w * p * scale + c * m) / (w + c))
    lo, hi = post[0], post[-1]
    if not hi > lo:
        table.converged = False
        return prior
    table.converged = True
    return tuple(min(1.0, max(0.0, (v - lo) / (hi - lo))) for v in post)


def normalize_curve(values: Sequence[float]) -> Tuple[float, ...]:
    """Affinely map a raw saving curve onto [0, 1] with pinned endpoints."""
    lo, hi = values[0], values[-1]
    if not hi > lo:
        raise ValueError("degenerate curve: last value must exceed the first")
    return tuple(min(1.0, max(0.0, (v - lo) / (hi - lo))) for v in values)


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

class LaraController:
    """Queue-aware deadhead limit. Learns the saving curve online unless a
    frozen ``g_hat`` is supplied."""

    name = "lara"

    def __init__(self, q_max, alpha, menu: LimitMenu, g_hat=None, prior_weight=10.0):
        self.menu = menu
        self.table = EstimatorTable(menu, prior_weight=prior_weight)
        self.frozen = g_hat is not None
        g0 = tuple(g_hat) if self.frozen else normalized_g_hat(self.table)
        self.state = ControllerState(q_max, alpha, menu, g0)

    def choose(self, queue_len: int, mean_trip_km: float) -> float:
        if not self.frozen:
            self.state.g_hat = normalized_g_hat(self.table)
        return select_limit(self.state, queue_len, mean_trip_km)

    def observe(self, limit: float, savings) -> None:
        if not self.frozen:
            record_savings(self.table, limit, savings)


class FixedLimitController:
    name = "fixed"

    def __init__(self, d: float):
        if not d > 0:
            raise ValueError(f"fixed limit must be > 0, got {d}")
        self.d = float(d)

    def choose(self, queue_len, mean_trip_km):
        return self.d

    def observe(self, limit, savings):
        pass


def fixed_limit_controller(d: float) -> FixedLimitController:
    return FixedLimitController(d)


class RandomLimitController:
    """Draws a menu limit uniformly per batch; a stationary randomized
    policy used to sample every bucket of the estimator."""

    name = "random"

    def __init__(self, menu: LimitMenu, seed: int = 0, prior_weight=10.0):
        self.menu = menu
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.table = EstimatorTable(menu, prior_weight=prior_weight)

    def choose(self, queue_len, mean_trip_km):
        return self.menu.limits[int(self.rng.integers(len(self.menu)))]

    def observe(self, limit, savings):
        record_savings(self.table, limit, savings)


class UnlimitedController:
    name = "unlimited"

    def choose(self, queue_len, mean_trip_km):
        return math.inf

    def observe(self, limit, savings):
        pass


# ---------------------------------------------------------------------------
# Matchers
# ---------------------------------------------------------------------------

# Above this many request-driver pairs a finite limit switches from dense
# distance blocks to a KD-tree candidate search.
DENSE_PAIRS_MAX = 20_000
# Row block size budget for the dense path.
BLOCK_PAIRS = 400_000


class _NeighborIndex:
    """Finds drivers within ``limit`` km of a block of pickups.

    KD-trees over (lat, scaled lon) radians give a superset of the pairs,
    using ``dist >= R*|dlat|`` and ``dist >= 2R*asin(c*|sin(dlon/2)|)``
    with ``c`` the smallest latitude cosine involved. Exact haversine then
    filters them.
    """

    def __init__(self, p_lat, p_lon, d_lat, d_lon, limit):
        self.p_lat, self.p_lon, self.d_lat, self.d_lon = p_lat, p_lon, d_lat, d_lon
        self.limit = limit
        phi_max = max(np.abs(np.radians(p_lat)).max(), np.abs(np.radians(d_lat)).max())
        c_min = float(np.cos(phi_max))
        self.half_phi = limit / EARTH_RADIUS_KM
        s = math.sin(min(self.half_phi / 2.0, math.pi / 2))
        half_lmb = math.pi if c_min <= s else 2.0 * math.asin(s / c_min)
        self.k = self.half_phi / half_lmb
        self.tree = cKDTree(np.column_stack([np.radians(d_lat), np.radians(d_lon) * self.k]))

    def pairs(self, lo, hi):
        """(row, col, km) for rows lo..hi-1, sorted by row then col."""
        pts = np.column_stack([np.radians(self.p_lat[lo:hi]), np.radians(self.p_lon[lo:hi]) * self.k])
        m = cKDTree(pts).sparse_distance_matrix(self.tree, self.half_phi * (1 + 1e-9) + 1e-15,
                                                p=np.inf, output_type="ndarray")
        rows, cols = m["i"].astype(np.int64) + lo, m["j"].astype(np.int64)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        km = haversine_km(self.p_lat[rows], self.p_lon[rows], self.d_lat[cols], self.d_lon[cols])
        ok = km <= self.limit
        return rows[ok], cols[ok], km[ok]


def greedy_match(p_lat, p_lon, trip_km, d_lat, d_lon, d_em, limit=math.inf, key="emission"):
    """Sequential greedy matching over arrays.

    Requests are taken in the given (FIFO) order, drivers are assumed
    sorted by id so ``argmin`` breaks ties toward the lower id. Returns
    ``(req_idx, drv_idx, deadhead_km, nearest_emission_g)`` arrays, where
    the last is what the nearest available driver (no limit) would have
    emitted on the same ride.
    """
    nq, na = len(p_lat), len(d_lat)
    empty = (np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0), np.empty(0))
    if nq == 0 or na == 0:
        return empty
    p_lat = np.asarray(p_lat, dtype=float)
    p_lon = np.asarray(p_lon, dtype=float)
    d_lat = np.asarray(d_lat, dtype=float)
    d_lon = np.asarray(d_lon, dtype=float)
    trip_km = np.asarray(trip_km, dtype=float)
    d_em = np.asarray(d_em, dtype=float)
    finite = math.isfinite(limit)
    avail = np.ones(na, dtype=bool)
    left = na
    ri, di, dh, ne = [], [], [], []

    def take(i, c, dist, row_all):
        nonlocal left
        if key == "nearest":
            k = int(np.argmin(dist))
        else:
            k = int(np.argmin(d_em[c] * (dist + trip_km[i])))
        j = int(c[k])
        # counterfactual: nearest available driver, ignoring the limit
        idx = np.flatnonzero(avail)
        if row_all is None:
            row_all = haversine_km(p_lat[i], p_lon[i], d_lat[idx], d_lon[idx])
        else:
            row_all = row_all[idx]
        m = int(np.argmin(row_all))
        ri.append(i)
        di.append(j)
        dh.append(float(dist[k]))
        ne.append(d_em[idx[m]] * (float(row_all[m]) + trip_km[i]))
        avail[j] = False
        left -= 1

    chunk = max(1, BLOCK_PAIRS // na)
    if finite and nq * na > DENSE_PAIRS_MAX:
        index = _NeighborIndex(p_lat, p_lon, d_lat, d_lon, limit)
        # growing blocks: wide limits exhaust the drivers within the first rows
        lo, size = 0, max(64, 2 * na)
        while lo < nq and left > 0:
            hi = min(nq, lo + size)
            rows, cols, km = index.pairs(lo, hi)
            lo, size = hi, min(2 * size, max(chunk, 64))
            starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]]) if len(rows) else np.empty(0, int)
            for a, b in zip(starts, np.r_[starts[1:], len(rows)]):
                if left == 0:
                    break
                c, dist = cols[a:b], km[a:b]
                free = avail[c]
                if free.any():
                    take(int(rows[a]), c[free], dist[free], None)
    else:
        # dense blocks of rows; an unlimited matcher never needs more than na rows
        stop = nq if finite else min(nq, na)
        for lo in range(0, stop, chunk):
            if left == 0:
                break
            hi = min(stop, lo + chunk)
            D = haversine_km(p_lat[lo:hi, None], p_lon[lo:hi, None], d_lat[None, :], d_lon[None, :])
            # rows with nobody in range stay out of reach as drivers leave
            rows = np.flatnonzero((D <= limit).any(axis=1)) if finite else range(hi - lo)
            for r in rows:
                if left == 0:
                    break
                ok = avail & (D[r] <= limit) if finite else avail
                c = np.flatnonzero(ok)
                if len(c):
                    take(lo + r, c, D[r, c], D[r])
    if not ri:
        return empty
    return np.array(ri), np.array(di), np.array(dh, dtype=float), np.array(ne, dtype=float)


def _fifo(queue: Sequence[RideRequest]) -> List[RideRequest]:
    return sorted(queue, key=lambda r: (r.request_time, r.id))


def _to_assignments(queue, drivers, limit, key, batch_index, assign_time, speed_kmh):
    q = _fifo(queue)
    ds = sorted(drivers, key=lambda d: d.id)
    if assign_time is None:
        assign_time = max((r.request_time for r in q), default=0.0)
    ri, di, dh, ne = greedy_match(
        [r.pickup.lat for r in q], [r.pickup.lon for r in q], [r.trip_distance for r in q],
        [d.location.lat for d in ds], [d.location.lon for d in ds], [d.unit_emission for d in ds],
        limit=limit, key=key,
    )
    out = []
    for i, j, dkm, near in zip(ri, di, dh, ne):
        r, d = q[i], ds[j]
        dkm = float(dkm)
        pickup = assign_time + dkm / speed_kmh * 3600.0
        dropoff = pickup + r.trip_distance / speed_kmh * 3600.0
        out.append(Assignment(
            request_id=r.id, driver_id=d.id, batch_index=batch_index,
            deadhead_km=dkm, trip_km=r.trip_distance, unit_emission=d.unit_emission,
            emission_g=d.unit_emission * (dkm + r.trip_distance),
            request_time=r.request_time, assign_time=assign_time,
            pickup_time=pickup, dropoff_time=dropoff,
            nearest_driver_emission_g=float(near),
        ))
    return out


def match_batch(queue, drivers, limit, *, batch_index=0, assign_time=None, speed_kmh=30.0):
    """Lowest total-emission driver within ``limit`` km of each pickup."""
    if not limit > 0:
        raise ValueError(f"limit must be > 0, got {limit}")
    return _to_assignments(queue, drivers, limit, "emission", batch_index, assign_time, speed_kmh)


def nearest_matcher(queue, drivers, *, batch_index=0, assign_time=None, speed_kmh=30.0):
    """Closest available driver, no limit (the ``cd`` baseline)."""
    return _to_assignments(queue, drivers, math.inf, "nearest", batch_index, assign_time, speed_kmh)


def emission_greedy_matcher(queue, drivers, *, batch_index=0, assign_time=None, speed_kmh=30.0):
    """Lowest total-emission driver with unlimited deadhead (the ``eg`` proxy
    for an emission-aware baseline)."""
    return _to_assignments(queue, drivers, math.inf, "emission", batch_index, assign_time, speed_kmh)


# ---------------------------------------------------------------------------
# Policy strings
# ---------------------------------------------------------------------------

@dataclass
class Policy:
    name: str
    controller: object
    key: str  # matcher selection key: "emission" or "nearest"


def make_policy(spec: str, q_max=240, alpha=0.75, menu: LimitMenu = None,
                g_hat=None, prior_weight=10.0, seed=0) -> Policy:
    """Build a policy from ``lara``, ``cd``, ``eg``, ``fixed:<d>`` or ``random``."""
    from .core import DEFAULT_MENU
    menu = menu or DEFAULT_MENU
    s = spec.strip().lower()
    if s == "lara":
        return Policy("lara", LaraController(q_max, alpha, menu, g_hat=g_hat, prior_weight=prior_weight), "emission")
    if s == "cd":
        return Policy("cd", UnlimitedController(), "nearest")
    if s == "eg":
        return Policy("eg", UnlimitedController(), "emission")
    if s == "random":
        return Policy("random", RandomLimitController(menu, seed=seed, prior_weight=prior_weight), "emission")
    if s.startswith("fixed:"):
        try:
            d = float(s.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad fixed-limit policy {spec!r}") from None
        return Policy(f"fixed:{d:g}", FixedLimitController(d), "emission")
    raise ValueError(f"unknown policy {spec!r}; expected lara, cd, eg, fixed:<d> or random")
