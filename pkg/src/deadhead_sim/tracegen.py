"""
Seeded synthetic workload: a stationary stream of ride requests over a
bounding box around Austin, TX, and a fleet with uniform unit emissions.

Randomness comes from numpy's PCG64 bit generator seeded with
``SyntheticConfig.seed``; requests and drivers use independent child
streams so changing the fleet size never perturbs the request trace.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .core import Driver, Location, RideRequest, destination, haversine_km

AUSTIN_REGION = ((30.10, 30.45), (-97.95, -97.55))

TRIP_MIN_KM = 1.0
TRIP_MAX_KM = 60.0
# Bearings tried before a dropoff outside the region is clamped into it.
MAX_BEARING_TRIES = 64


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    num_requests: int = 50_000
    interarrival_s: float = 5.0
    region: Tuple[Tuple[float, float], Tuple[float, float]] = AUSTIN_REGION
    trip_mean_km: float = 15.0
    trip_sd_km: float = 5.0
    num_drivers: int = 500
    emission_min: float = 70.0
    emission_max: float = 300.0
    arrivals: str = "deterministic"

    def __post_init__(self):
        (lat0, lat1), (lon0, lon1) = self.region
        if not (lat0 < lat1 and lon0 < lon1):
            raise ValueError(f"degenerate region: {self.region}")
        if not self.trip_mean_km > 0:
            raise ValueError("trip_mean_km must be > 0")
        if not self.trip_sd_km >= 0:
            raise ValueError("trip_sd_km must be >= 0")
        if not self.emission_min < self.emission_max:
            raise ValueError("emission_min must be < emission_max")
        if self.emission_min <= 0:
            raise ValueError("emission_min must be > 0")
        if self.num_requests < 0 or self.num_drivers < 0:
            raise ValueError("counts must be non-negative")
        if not self.interarrival_s > 0:
            raise ValueError("interarrival_s must be > 0")
        if self.arrivals not in ("deterministic", "poisson"):
            raise ValueError(f"unknown arrival process {self.arrivals!r}")

    @property
    def region_diagonal_km(self) -> float:
        (lat0, lat1), (lon0, lon1) = self.region
        return float(haversine_km(lat0, lon0, lat1, lon1))


def _streams(seed: int):
    req, drv = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(req)), np.random.Generator(np.random.PCG64(drv))


def _trip_length(rng: np.random.Generator, mean: float, sd: float) -> float:
    if sd == 0:
        return min(max(mean, TRIP_MIN_KM), TRIP_MAX_KM)
    while True:
        x = rng.normal(mean, sd)
        if TRIP_MIN_KM <= x <= TRIP_MAX_KM:
            return float(x)


def _place_dropoff(rng, lat, lon, length, region):
    (lat0, lat1), (lon0, lon1) = region
    for _ in range(MAX_BEARING_TRIES):
        dlat, dlon = destination(lat, lon, rng.uniform(0.0, 2.0 * math.pi), length)
        if lat0 <= dlat <= lat1 and lon0 <= dlon <= lon1:
            return dlat, dlon
    return min(max(dlat, lat0), lat1), min(max(dlon, lon0), lon1)


def generate_requests(cfg: SyntheticConfig) -> List[RideRequest]:
    if cfg.region_diagonal_km < cfg.trip_mean_km:
        raise ValueError(
            f"region diagonal {cfg.region_diagonal_km:.1f} km cannot hold "
            f"{cfg.trip_mean_km} km trips"
        )
    rng, _ = _streams(cfg.seed)
    (lat0, lat1), (lon0, lon1) = cfg.region

    if cfg.arrivals == "poisson":
        times = np.cumsum(rng.exponential(cfg.interarrival_s, cfg.num_requests))
        times = times - times[0] if cfg.num_requests else times
    else:
        times = np.arange(cfg.num_requests) * cfg.interarrival_s

    out = []
    for k in range(cfg.num_requests):
        plat = float(rng.uniform(lat0, lat1))
        plon = float(rng.uniform(lon0, lon1))
        length = _trip_length(rng, cfg.trip_mean_km, cfg.trip_sd_km)
        dlat, dlon = _place_dropoff(rng, plat, plon, length, cfg.region)
        if dlat == plat and dlon == plon:
            # clamped back onto the pickup; nudge inside the box
            dlat = plat + (1e-3 if plat < lat1 else -1e-3)
        out.append(RideRequest(k, float(times[k]), Location(plat, plon), Location(dlat, dlon)))
    return out


def generate_drivers(cfg: SyntheticConfig) -> List[Driver]:
    _, rng = _streams(cfg.seed)
    (lat0, lat1), (lon0, lon1) = cfg.region
    n = cfg.num_drivers
    lats = rng.uniform(lat0, lat1, n)
    lons = rng.uniform(lon0, lon1, n)
    em = rng.uniform(cfg.emission_min, cfg.emission_max, n)
    return [Driver(i, float(em[i]), Location(float(lats[i]), float(lons[i])), 0.0) for i in range(n)]


TRACE_HEADER = ["request_timestamp", "start_lat", "start_lon", "end_lat", "end_lon"]


def write_trace_csv(requests, path) -> None:
    """Archive requests in the same schema ``ingest.load_requests`` reads."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in requests:
            w.writerow([repr(r.request_time), repr(r.pickup.lat), repr(r.pickup.lon),
                        repr(r.dropoff.lat), repr(r.dropoff.lon)])
