import json

import pytest

from deadhead_sim.engine import SimConfig, SimulationError, run
from deadhead_sim.ingest import (IngestConfig, IngestError, build_fleet, load_requests,
                                 parse_emission_assignment, parse_timestamp)

HEADER = "request_timestamp,start_lat,start_lon,end_lat,end_lon,make,model,year\n"
ROWS = [
    "2016-12-01T08:00:00,30.27,-97.74,30.30,-97.70,Toyota,Prius,2015\n",
    "2016-12-01T08:05:00,30.28,-97.75,30.25,-97.72,Ford,F-150,2012\n",
    "2016-12-01T07:59:00,30.26,-97.73,30.31,-97.71,Honda,Civic,2016\n",
]


@pytest.fixture
def trace(tmp_path):
    p = tmp_path / "rides.csv"
    p.write_text(HEADER + "".join(ROWS) + "not-a-time,30.2,-97.7,30.3,-97.6,,,\n")
    return str(p)


class TestLoadRequests:
    def test_skips_malformed_row(self, trace):
        reqs, report = load_requests(IngestConfig(trace))
        assert len(reqs) == 3
        assert (report.rows, report.kept, report.skipped) == (4, 3, 1)
        assert json.loads(report.to_json()) == {"rows": 4, "kept": 3, "skipped": 1}

    def test_sorted_and_rebased(self, trace):
        reqs, _ = load_requests(IngestConfig(trace))
        assert [r.request_time for r in reqs] == [0.0, 60.0, 360.0]
        assert reqs[0].pickup.lat == 30.26

    def test_out_of_range_and_coincident_rows_dropped(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text(HEADER + ROWS[0] + "1480579200,95.0,-97.7,30.3,-97.6,,,\n"
                     + "1480579200,30.2,-97.7,30.2,-97.7,,,\n" + "1480579260,30.2,,30.3,-97.6,,,\n")
        reqs, report = load_requests(IngestConfig(str(p)))
        assert len(reqs) == 1 and report.skipped == 3

    def test_time_window(self, trace):
        cfg = IngestConfig(trace, time_window=("2016-12-01T08:00:00", "2016-12-01T08:01:00"))
        reqs, report = load_requests(cfg)
        assert len(reqs) == 1 and report.out_of_window == 2

    def test_window_excluding_everything(self, trace):
        cfg = IngestConfig(trace, time_window=("2017-01-01T00:00:00", "2017-01-02T00:00:00"))
        reqs, _ = load_requests(cfg)
        assert reqs == []
        with pytest.raises(SimulationError):
            run(reqs, build_fleet(IngestConfig(trace), load_requests(IngestConfig(trace))[0]), SimConfig())

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestError, match="not found"):
            load_requests(IngestConfig(str(tmp_path / "nope.csv")))

    def test_missing_column_named(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("request_timestamp,start_lat,start_lon,end_lat\n0,30,-97,30.1\n")
        with pytest.raises(IngestError, match="end_lon"):
            load_requests(IngestConfig(str(p)))

    def test_lossless_on_clean_rows(self, tmp_path):
        p = tmp_path / "clean.csv"
        lines = [f"{1480579200 + 7 * i},30.{20 + i % 10},-97.7,30.3,-97.6{i % 10}\n" for i in range(200)]
        p.write_text("request_timestamp,start_lat,start_lon,end_lat,end_lon\n" + "".join(lines))
        reqs, report = load_requests(IngestConfig(str(p)))
        assert len(reqs) == 200 == report.kept
        assert all(b.request_time > a.request_time for a, b in zip(reqs, reqs[1:]))


class TestParsing:
    @pytest.mark.parametrize("text,expected", [
        ("1480579200", 1480579200.0),
        ("2016-12-01T08:00:00Z", 1480550400.0 + 8 * 3600),
        ("2016-12-01 08:00:00+00:00", 1480550400.0 + 8 * 3600),
        ("2016-12-01T02:00:00-06:00", 1480550400.0 + 8 * 3600),
    ])
    def test_timestamps(self, text, expected):
        assert parse_timestamp(text) == expected

    def test_emission_assignment_forms(self):
        assert parse_emission_assignment("sample_uniform(70,300)") == ("sample_uniform", (70.0, 300.0))
        assert parse_emission_assignment("column:gco2") == ("column", "gco2")
        assert parse_emission_assignment("lookup_file:/x.csv") == ("lookup_file", "/x.csv")
        with pytest.raises(ValueError):
            parse_emission_assignment("random")

    def test_config_validation(self, trace):
        with pytest.raises(ValueError):
            IngestConfig(trace, driver_count=0)
        with pytest.raises(ValueError):
            IngestConfig(trace, emission_assignment="sample_uniform(0,300)")


class TestBuildFleet:
    def test_uniform_emissions_in_range(self, trace):
        reqs, _ = load_requests(IngestConfig(trace))
        fleet = build_fleet(IngestConfig(trace, driver_count=50), reqs)
        assert len(fleet) == 50
        assert all(70 <= d.unit_emission <= 300 for d in fleet)
        pickups = {(r.pickup.lat, r.pickup.lon) for r in reqs}
        assert all((d.location.lat, d.location.lon) in pickups for d in fleet)

    def test_single_driver(self, trace):
        reqs, _ = load_requests(IngestConfig(trace))
        assert len(build_fleet(IngestConfig(trace, driver_count=1), reqs)) == 1

    def test_deterministic(self, trace):
        cfg = IngestConfig(trace, driver_count=20, seed=3)
        reqs, _ = load_requests(cfg)
        assert build_fleet(cfg, reqs) == build_fleet(cfg, reqs)

    def test_empty_requests_rejected(self, trace):
        with pytest.raises(IngestError):
            build_fleet(IngestConfig(trace), [])

    def test_lookup_with_fallback(self, trace, tmp_path):
        lk = tmp_path / "lookup.csv"
        lk.write_text("make,model,year,gco2_per_km\nToyota,Prius,2015,95\nFord,F-150,2012,280\n")
        cfg = IngestConfig(trace, driver_count=60, emission_assignment=f"lookup_file:{lk}", seed=1)
        reqs, report = load_requests(cfg)
        fleet = build_fleet(cfg, reqs, report)
        em = [d.unit_emission for d in fleet]
        assert 95.0 in em and 280.0 in em
        assert any(e not in (95.0, 280.0) for e in em)  # the Civic has no entry
        assert report.warnings and "missing from lookup" in report.warnings[0]

    def test_emission_column(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("request_timestamp,start_lat,start_lon,end_lat,end_lon,gco2\n"
                     "0,30.2,-97.7,30.3,-97.6,120\n10,30.21,-97.7,30.3,-97.6,210\n")
        cfg = IngestConfig(str(p), driver_count=10, emission_assignment="column:gco2")
        reqs, _ = load_requests(cfg)
        assert {d.unit_emission for d in build_fleet(cfg, reqs)} <= {120.0, 210.0}
