"""
Load RideAustin-style request exports and build a fleet for them.

Expected header (extra columns are ignored)::

    request_timestamp,start_lat,start_lon,end_lat,end_lon[,make,model,year]

Timestamps are ISO-8601 or epoch seconds. Rows that cannot be parsed,
fall outside coordinate ranges or have coincident endpoints are skipped
and counted in the report.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import Driver, Location, RideRequest

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("request_timestamp", "start_lat", "start_lon", "end_lat", "end_lon")


class IngestError(Exception):
    pass


@dataclass(frozen=True)
class IngestConfig:
    path: str
    driver_count: int = 100
    # "sample_uniform(70,300)", "column:<name>" or "lookup_file:<path>"
    emission_assignment: str = "sample_uniform(70,300)"
    time_window: Optional[Tuple[str, str]] = None
    seed: int = 0
    fleet_positions: str = "empirical"  # or "uniform" over the pickup bounding box

    def __post_init__(self):
        if not self.driver_count > 0:
            raise ValueError("driver_count must be > 0")
        mode, arg = parse_emission_assignment(self.emission_assignment)
        if mode == "sample_uniform":
            lo, hi = arg
            if not (0 < lo < hi):
                raise ValueError(f"emission bounds must satisfy 0 < min < max, got {arg}")
        if self.fleet_positions not in ("empirical", "uniform"):
            raise ValueError(f"unknown fleet_positions {self.fleet_positions!r}")


@dataclass
class IngestReport:
    rows: int = 0
    kept: int = 0
    skipped: int = 0
    out_of_window: int = 0
    warnings: List[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "kept": self.kept, "skipped": self.skipped})


def parse_emission_assignment(text: str):
    text = text.strip()
    if text.startswith("column:"):
        return "column", text.split(":", 1)[1]
    if text.startswith("lookup_file:"):
        return "lookup_file", text.split(":", 1)[1]
    if text.startswith("sample_uniform(") and text.endswith(")"):
        try:
            lo, hi = (float(x) for x in text[len("sample_uniform("):-1].split(","))
        except ValueError:
            raise ValueError(f"bad emission assignment {text!r}") from None
        return "sample_uniform", (lo, hi)
    raise ValueError(f"unknown emission assignment {text!r}")


def parse_timestamp(value: str) -> float:
    """Epoch seconds from an epoch number or an ISO-8601 string (naive
    times are taken as UTC)."""
    v = value.strip()
    try:
        return float(v)
    except ValueError:
        pass
    if v.endswith("Z"):
        v = v[:-1] + "+00:00"
    dt = datetime.fromisoformat(v)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _read_rows(path):
    if not os.path.exists(path):
        raise IngestError(f"trace file not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        cols = reader.fieldnames or []
        for c in REQUIRED_COLUMNS:
            if c not in cols:
                raise IngestError(f"missing required column: {c}")
        return list(reader)


def _parse_row(row):
    t = parse_timestamp(row["request_timestamp"])
    vals = [float(row[c]) for c in REQUIRED_COLUMNS[1:]]
    if not all(math.isfinite(v) for v in vals) or not math.isfinite(t):
        raise ValueError("non-finite value")
    return t, Location(vals[0], vals[1]), Location(vals[2], vals[3])


def _window(cfg):
    if cfg.time_window is None:
        return -math.inf, math.inf
    lo, hi = cfg.time_window
    return parse_timestamp(str(lo)), parse_timestamp(str(hi))


def _valid_rows(cfg: IngestConfig, report: Optional[IngestReport] = None):
    """Parsed in-window rows as (time, pickup, dropoff, raw_row), file order."""
    lo, hi = _window(cfg)
    out = []
    for row in _read_rows(cfg.path):
        if report is not None:
            report.rows += 1
        try:
            t, p, d = _parse_row(row)
            if p == d:
                raise ValueError("coincident endpoints")
        except (ValueError, TypeError, KeyError):
            if report is not None:
                report.skipped += 1
            continue
        if not lo <= t <= hi:
            if report is not None:
                report.out_of_window += 1
            continue
        out.append((t, p, d, row))
    out.sort(key=lambda x: x[0])
    return out


def load_requests(cfg: IngestConfig) -> Tuple[List[RideRequest], IngestReport]:
    """Parse, window, sort and rebase the trace so the first request is t=0."""
    report = IngestReport()
    rows = _valid_rows(cfg, report)
    t0 = rows[0][0] if rows else 0.0
    reqs = [RideRequest(i, t - t0, p, d) for i, (t, p, d, _) in enumerate(rows)]
    report.kept = len(reqs)
    return reqs, report


def _load_lookup(path) -> Dict[tuple, float]:
    table = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (row["make"].strip().lower(), row["model"].strip().lower(), str(row["year"]).strip())
            table[key] = float(row["gco2_per_km"])
    return table


def build_fleet(cfg: IngestConfig, requests: List[RideRequest],
                report: Optional[IngestReport] = None) -> List[Driver]:
    if not requests:
        raise IngestError("cannot build a fleet for an empty trace")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = cfg.driver_count
    plat = np.array([r.pickup.lat for r in requests])
    plon = np.array([r.pickup.lon for r in requests])
    if cfg.fleet_positions == "empirical":
        idx = rng.integers(0, len(requests), n)
        lats, lons = plat[idx], plon[idx]
    else:
        lats = rng.uniform(plat.min(), plat.max(), n)
        lons = rng.uniform(plon.min(), plon.max(), n)

    mode, arg = parse_emission_assignment(cfg.emission_assignment)
    if mode == "sample_uniform":
        em = rng.uniform(arg[0], arg[1], n)
    elif mode == "column":
        vals = []
        for *_, row in _valid_rows(cfg):
            try:
                v = float(row.get(arg, ""))
            except ValueError:
                continue
            if math.isfinite(v) and v > 0:
                vals.append(v)
        if not vals:
            raise IngestError(f"emission column {arg!r} has no usable values")
        em = np.array(vals)[rng.integers(0, len(vals), n)]
    else:
        table = _load_lookup(arg)
        rows = [row for *_, row in _valid_rows(cfg)]
        picks = rng.integers(0, len(rows), n)
        em = np.empty(n)
        missing = 0
        for k, i in enumerate(picks):
            row = rows[i]
            key = (str(row.get("make", "")).strip().lower(), str(row.get("model", "")).strip().lower(),
                   str(row.get("year", "")).strip())
            if key in table:
                em[k] = table[key]
            else:
                em[k] = rng.uniform(70.0, 300.0)
                missing += 1
        if missing:
            msg = f"{missing} vehicles missing from lookup {arg}; sampled uniformly in [70, 300]"
            log.warning(msg)
            if report is not None:
                report.warnings.append(msg)
    return [Driver(i, float(em[i]), Location(float(lats[i]), float(lons[i])), 0.0) for i in range(n)]
