"""Shared fixtures.

Every call to ``engine.run`` made anywhere in the suite is wrapped so its
batch log is replayed through the queue recursion on the spot; a mismatch
fails the calling test. ``REPLAYED`` counts the runs checked this way.
"""

import math

import pytest

import deadhead_sim
import deadhead_sim.cli
import deadhead_sim.engine
import deadhead_sim.evaluate
from deadhead_sim.core import Driver, Location, RideRequest
from deadhead_sim.engine import replay_queue
from deadhead_sim.tracegen import SyntheticConfig, generate_drivers, generate_requests

REPLAYED = {"runs": 0, "batches": 0}
ACCEPTANCE = {}

_original_run = deadhead_sim.engine.run


def _checked_run(requests, drivers, cfg, policy=None):
    res = _original_run(requests, drivers, cfg, policy)
    logged = [b.Q_b for b in res.batch_log]
    assert replay_queue(res.batch_log, cfg.q_max) == logged, "queue recursion replay mismatch"
    REPLAYED["runs"] += 1
    REPLAYED["batches"] += len(logged)
    return res


for _mod in (deadhead_sim, deadhead_sim.engine, deadhead_sim.evaluate, deadhead_sim.cli):
    _mod.run = _checked_run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:>3s} {'PASS' if ok else 'FAIL'}  {detail}")


def make_request(i, t, plat, plon, dlat, dlon):
    return RideRequest(i, float(t), Location(plat, plon), Location(dlat, dlon))


def make_driver(i, e, lat, lon, at=0.0):
    return Driver(i, float(e), Location(lat, lon), at)


@pytest.fixture
def small_synthetic():
    cfg = SyntheticConfig(seed=7, num_requests=600, num_drivers=40)
    return generate_requests(cfg), generate_drivers(cfg)


@pytest.fixture
def ab_scenario():
    """Trip of 10 km; driver A 2 km from the pickup at 250 g/km, driver B
    8 km away at 100 g/km. Positions are along a meridian."""
    from deadhead_sim.core import EARTH_RADIUS_KM
    km = math.degrees(1.0 / EARTH_RADIUS_KM)  # degrees of latitude per km
    lat0, lon0 = 30.0, -97.7
    req = make_request(0, 0.0, lat0, lon0, lat0 - 10 * km, lon0)
    a = make_driver(0, 250.0, lat0 + 2 * km, lon0)
    b = make_driver(1, 100.0, lat0 + 8 * km, lon0)
    return req, a, b
