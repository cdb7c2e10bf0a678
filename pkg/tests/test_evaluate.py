import json
import math
from dataclasses import replace

import numpy as np
import pytest

from deadhead_sim.core import Assignment, BatchRecord, LimitMenu
from deadhead_sim.engine import SimConfig, SimResult, run
from deadhead_sim.evaluate import (BoundReport, OracleResult, calibrated_g_hat, check_theorem1, fairness_tables,
                                   gap_term, saving_scale_for, stationary_oracle, summarize, write_fairness_csv,
                                   write_summary_json)
from deadhead_sim.tracegen import SyntheticConfig, generate_drivers, generate_requests


def assignment(i, emission, nearest, t_assign=0.0, t_drop=100.0, e=100.0, dh=1.0, trip=4.0, driver=0):
    return Assignment(i, driver, 0, dh, trip, e, emission, 0.0, t_assign, t_assign + 10.0, t_drop, nearest)


def result(assignments, cfg=None):
    return SimResult([], list(assignments), cfg or SimConfig(), "digest")


class TestSummarize:
    def test_nearest_everywhere_gives_zero_emission_term(self):
        res = result(assignment(i, 500.0, 500.0) for i in range(10))
        m = summarize(res, 0.5)
        assert m.E_N == 0.0
        assert m.objective == pytest.approx(0.5 * m.R_N)

    def test_rate(self):
        a = [assignment(i, 100.0, 100.0, t_assign=0.0, t_drop=1000.0 if i == 99 else 10.0) for i in range(100)]
        m = summarize(result(a), 0.75)
        assert m.T_N == 1000.0
        assert m.R_N == pytest.approx(0.1)

    def test_alpha_zero_ranks_by_rate(self):
        fast = result(assignment(i, 100, 300, t_drop=500.0) for i in range(50))
        slow = result(assignment(i, 100, 900, t_drop=900.0) for i in range(50))
        obj = [summarize(r, 0.0, 100.0).objective for r in (fast, slow)]
        rate = [summarize(r, 0.0, 100.0).R_N for r in (fast, slow)]
        assert obj == rate and obj[0] > obj[1]

    def test_normalized_savings_are_clipped(self):
        a = [assignment(0, 100, 50), assignment(1, 100, 400), assignment(2, 100, 150)]
        m = summarize(result(a), 1.0, saving_scale=100.0)
        # clip(-0.5)=0, clip(3)=1, 0.5 -> 1.5 over T_N = 100
        assert m.E_N == pytest.approx(1.5 / 100.0)

    def test_scale_is_95th_percentile_of_positive_savings(self):
        a = [assignment(i, 0.0, float(s)) for i, s in enumerate(range(-5, 101))]
        assert saving_scale_for([result(a)]) == pytest.approx(np.percentile(np.arange(1, 101), 95))

    def test_doubling_horizon_halves_both_rates(self):
        a = [assignment(i, 100, 200, t_drop=400.0) for i in range(20)]
        b = [replace(x, dropoff_time=800.0) for x in a]
        m1, m2 = summarize(result(a), 0.5, 100.0), summarize(result(b), 0.5, 100.0)
        assert m2.E_N == pytest.approx(m1.E_N / 2)
        assert m2.R_N == pytest.approx(m1.R_N / 2)

    def test_zero_horizon_flagged(self, caplog):
        a = [Assignment(0, 0, 0, 0.0, 1.0, 100.0, 100.0, 0.0, 5.0, 5.0, 5.0, 100.0)]
        m = summarize(result(a), 0.5)
        assert not m.defined and math.isnan(m.objective)

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            summarize(result([assignment(0, 1, 1)]), 1.2)

    def test_summary_json_is_flat_and_sorted(self, tmp_path):
        m = summarize(result(assignment(i, 100, 150, e=100 + 60 * i) for i in range(4)), 0.5)
        write_summary_json(m, tmp_path / "s.json", extra={"seed": 3})
        text = (tmp_path / "s.json").read_text()
        d = json.loads(text)
        assert d["seed"] == 3 and "low_ride_share_pct" in d
        assert list(d) == sorted(d)
        assert all(not isinstance(v, dict) for v in d.values())


class TestFairness:
    def test_single_class(self):
        t = fairness_tables(result(assignment(i, 1, 1, e=100.0) for i in range(5)))
        assert t["low"]["ride_share_pct"] == 100.0
        assert t["high"]["ride_share_pct"] == 0.0

    def test_shares(self):
        a = [assignment(0, 1, 1, e=100.0, dh=1.0, trip=3.0), assignment(1, 1, 1, e=200.0, dh=2.0, trip=2.0),
             assignment(2, 1, 1, e=280.0, dh=0.0, trip=5.0), assignment(3, 1, 1, e=120.0, dh=3.0, trip=1.0)]
        t = fairness_tables(result(a))
        assert t["low"]["ride_share_pct"] == 50.0
        assert t["low"]["deadhead_share_pct"] == pytest.approx(50.0)
        assert t["mid"]["deadhead_share_pct"] == pytest.approx(50.0)
        assert t["high"]["deadhead_share_pct"] == 0.0
        total = sum(t[c]["ride_share_pct"] for c in ("low", "mid", "high"))
        assert total == pytest.approx(100.0)
        for row in t.values():
            assert all(0 <= v <= 100 for v in row.values())

    def test_csv_layout(self, tmp_path):
        t = fairness_tables(result([assignment(0, 1, 1, e=100.0)]))
        write_fairness_csv({"lara": t, "cd": t}, tmp_path / "f.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "metric,emission_class,lara,cd"
        assert lines[1] == "ride_share_pct,low,100.0,100.0"
        assert len(lines) == 7


@pytest.fixture(scope="module")
def trace():
    cfg = SyntheticConfig(seed=21, num_requests=2500, num_drivers=70, interarrival_s=10)
    return generate_requests(cfg), generate_drivers(cfg)


@pytest.fixture(scope="module")
def oracle(trace):
    return stationary_oracle(*trace, SimConfig(alpha=0.75, q_max=240))


class TestOracle:
    def test_runs_every_menu_limit(self, oracle):
        assert oracle.n_simulations == 6
        assert sorted(oracle.objectives) == [1, 2, 5, 10, 15, 30]

    def test_best_dominates(self, oracle):
        best_d, obj_best = oracle
        assert all(obj_best >= v for v in oracle.objectives.values())
        assert oracle.objectives[best_d] == obj_best

    def test_rerun_with_shared_scale_agrees(self, trace, oracle):
        other = stationary_oracle(*trace, SimConfig(menu=LimitMenu([1, 2, 5, 10, 15, 30])),
                                  saving_scale=oracle.saving_scale)
        assert other.best_d == oracle.best_d

    def test_alpha_zero_maximizes_rate(self, trace, oracle):
        rates = {d: summarize(r, 0.0, oracle.saving_scale).R_N for d, r in oracle.results.items()}
        a0 = stationary_oracle(*trace, SimConfig(alpha=0.0), saving_scale=oracle.saving_scale)
        assert a0.best_d == max(sorted(rates), key=lambda d: rates[d])

    def test_calibrated_curve_pinned(self, oracle):
        g = calibrated_g_hat(oracle)
        assert g[0] == 0.0 and g[-1] == 1.0 and all(0 <= x <= 1 for x in g)

    def test_gap_check(self, trace, oracle):
        lara = run(*trace, SimConfig(g_hat=calibrated_g_hat(oracle)))
        rep = check_theorem1(lara, oracle)
        assert isinstance(rep, BoundReport)
        assert rep.gap_term >= 0
        assert rep.slack == pytest.approx(0.05 * abs(oracle.obj_best))
        assert "fixed" in rep.to_dict()["benchmark"]

    def test_gap_shrinks_with_q_max(self, trace, oracle):
        lara = run(*trace, SimConfig())
        durations = [a.trip_duration for a in lara.assignment_log]
        gaps = [gap_term(lara.batch_log, durations, q) for q in (10, 100, 1000, 10**6)]
        assert gaps == sorted(gaps, reverse=True)
        assert gaps[-1] < 1e-3 * gaps[0]

    def test_constant_arrivals_gap(self):
        log = [BatchRecord(b, 0.0, 5, 5, 1.0, 5, 3, 10.0, 95) for b in range(10)]
        assert gap_term(log, [600.0], 100) == pytest.approx(9.0 / (100 * 600.0))

    def test_mismatched_inputs_rejected(self, trace, oracle):
        reqs, drivers = trace
        other = run(reqs[:-5], drivers, SimConfig())
        with pytest.raises(ValueError, match="different"):
            check_theorem1(other, oracle)
        mismatched = run(reqs, drivers, SimConfig(alpha=0.5))
        with pytest.raises(ValueError, match="alpha"):
            check_theorem1(mismatched, oracle)
