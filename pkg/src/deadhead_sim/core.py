"""
Domain types shared across the simulator, and geodesic distance.

All records are frozen dataclasses. The engine keeps its own mutable
array view of the fleet; these objects are never modified after
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0

# Emission-class thresholds in gCO2/km.
LOW_EMISSION_MAX = 150.0
HIGH_EMISSION_MIN = 250.0


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km. Broadcasts over numpy arrays."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def destination(lat: float, lon: float, bearing_rad: float, dist_km: float):
    """Point reached travelling `dist_km` from (lat, lon) on an initial bearing."""
    phi1 = math.radians(lat)
    lmb1 = math.radians(lon)
    delta = dist_km / EARTH_RADIUS_KM
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(bearing_rad)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lmb2 = lmb1 + math.atan2(
        math.sin(bearing_rad) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * sin_phi2,
    )
    lon2 = (math.degrees(lmb2) + 540.0) % 360.0 - 180.0
    return math.degrees(phi2), lon2


@dataclass(frozen=True)
class Location:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range [-90, 90]: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range [-180, 180]: {self.lon}")


def distance(a: Location, b: Location) -> float:
    """Haversine distance between two locations, in km."""
    if a.lat == b.lat and a.lon == b.lon:
        return 0.0
    return float(haversine_km(a.lat, a.lon, b.lat, b.lon))


def classify_emission(unit_emission: float,
                      low_max: float = LOW_EMISSION_MAX,
                      high_min: float = HIGH_EMISSION_MIN) -> str:
    if unit_emission < low_max:
        return "low"
    if unit_emission > high_min:
        return "high"
    return "mid"


@dataclass(frozen=True)
class RideRequest:
    id: int
    request_time: float
    pickup: Location
    dropoff: Location
    trip_distance: float = field(init=False)

    def __post_init__(self):
        if not self.request_time >= 0:
            raise ValueError(f"request {self.id}: request_time must be >= 0, got {self.request_time}")
        d = distance(self.pickup, self.dropoff)
        if not d > 0:
            raise ValueError(f"request {self.id}: pickup and dropoff coincide")
        object.__setattr__(self, "trip_distance", d)


@dataclass(frozen=True)
class Driver:
    id: int
    unit_emission: float
    location: Location
    available_at: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.unit_emission) and self.unit_emission > 0):
            raise ValueError(f"driver {self.id}: unit_emission must be > 0, got {self.unit_emission}")

    @property
    def emission_class(self) -> str:
        return classify_emission(self.unit_emission)


@dataclass(frozen=True)
class LimitMenu:
    limits: tuple

    def __init__(self, limits: Sequence[float]):
        vals = tuple(float(x) for x in limits)
        if not vals:
            raise ValueError("limit menu must be non-empty")
        if any(not (math.isfinite(v) and v > 0) for v in vals):
            raise ValueError(f"limit menu values must be positive and finite: {vals}")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"limit menu must be strictly increasing: {vals}")
        object.__setattr__(self, "limits", vals)

    @property
    def d_min(self) -> float:
        return self.limits[0]

    @property
    def d_max(self) -> float:
        return self.limits[-1]

    def __len__(self):
        return len(self.limits)

    def __iter__(self):
        return iter(self.limits)

    def __contains__(self, d):
        return d in self.limits

    def index(self, d: float) -> int:
        return self.limits.index(d)


DEFAULT_MENU = LimitMenu([1, 2, 5, 10, 15, 30])


@dataclass(frozen=True)
class Assignment:
    request_id: int
    driver_id: int
    batch_index: int
    deadhead_km: float
    trip_km: float
    unit_emission: float
    emission_g: float
    request_time: float
    assign_time: float
    pickup_time: float
    dropoff_time: float
    nearest_driver_emission_g: float

    @property
    def queue_wait(self) -> float:
        return self.assign_time - self.request_time

    @property
    def total_wait(self) -> float:
        return self.pickup_time - self.request_time

    @property
    def trip_duration(self) -> float:
        """Assignment to dropoff, in seconds."""
        return self.dropoff_time - self.assign_time

    @property
    def saving_g(self) -> float:
        return self.nearest_driver_emission_g - self.emission_g


@dataclass(frozen=True)
class BatchRecord:
    """One assignment round. ``chosen_limit`` is the limit actually used:
    ``math.inf`` for the unlimited matchers, or for a stalled batch relaxed
    past the menu (``escalated`` is then set)."""

    b: int
    time: float
    N_b: int
    M_b: int
    chosen_limit: Optional[float]
    n_b: int
    r_b: int
    d_tb: float
    Q_b: int
    escalated: bool = False

    def __post_init__(self):
        if self.n_b > min(self.M_b, self.N_b):
            raise ValueError(f"batch {self.b}: n_b={self.n_b} exceeds min(M_b, N_b)")
        if self.chosen_limit is None and self.n_b:
            raise ValueError(f"batch {self.b}: assignments made without a selected limit")
