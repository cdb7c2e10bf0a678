"""
Objective, metrics and the stationary-benchmark gap check.

Savings are normalized per assignment as
``clip((nearest_emission - emission) / scale, 0, 1)`` where ``scale`` is
the 95th percentile of positive raw savings. When several runs are
compared (oracle vs. LARA) they must share one scale, otherwise their
emission terms are not on the same footing; pass ``saving_scale``
explicitly in that case.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import HIGH_EMISSION_MIN, LOW_EMISSION_MAX, BatchRecord, classify_emission
from .engine import SimConfig, SimResult, run
from .policy import log_prior, normalize_curve

log = logging.getLogger(__name__)

SAVING_PERCENTILE = 95.0
DEFAULT_SLACK = 0.05
EMISSION_CLASSES = ("low", "mid", "high")


@dataclass
class SummaryMetrics:
    policy: str
    n_assignments: int
    T_N: float
    mean_emission_g: float
    mean_wait_s: float
    mean_queue_wait_s: float
    mean_deadhead_km: float
    deadhead_fraction: float
    saving_scale: float
    E_N: float
    R_N: float
    objective: float
    defined: bool
    fairness: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_flat_dict(self) -> dict:
        d = asdict(self)
        fair = d.pop("fairness")
        for cls, row in fair.items():
            for k, v in row.items():
                d[f"{cls}_{k}"] = v
        return d


def positive_savings(results: Sequence[SimResult]) -> np.ndarray:
    s = np.concatenate([np.array([a.saving_g for a in r.assignment_log], dtype=float)
                        for r in results]) if results else np.empty(0)
    return s[s > 0]


def saving_scale_for(results: Sequence[SimResult]) -> float:
    """95th percentile of the pooled positive raw savings; 0 when none."""
    pos = positive_savings(results)
    return float(np.percentile(pos, SAVING_PERCENTILE)) if len(pos) else 0.0


def normalized_savings(result: SimResult, saving_scale: float) -> np.ndarray:
    raw = np.array([a.saving_g for a in result.assignment_log], dtype=float)
    if saving_scale <= 0:
        return np.zeros_like(raw)
    return np.clip(raw / saving_scale, 0.0, 1.0)


def summarize(result: SimResult, alpha: Optional[float] = None,
              saving_scale: Optional[float] = None) -> SummaryMetrics:
    if alpha is None:
        alpha = result.config.alpha
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    A = result.assignment_log
    n = len(A)
    if saving_scale is None:
        saving_scale = saving_scale_for([result])
    T = result.T_N
    defined = T > 0 and n > 0
    if n:
        emission = np.array([a.emission_g for a in A])
        wait = np.array([a.total_wait for a in A])
        qwait = np.array([a.queue_wait for a in A])
        dh = np.array([a.deadhead_km for a in A])
        trip = np.array([a.trip_km for a in A])
        mean_em, mean_wait, mean_q = float(emission.mean()), float(wait.mean()), float(qwait.mean())
        mean_dh = float(dh.mean())
        dh_frac = float(dh.sum() / (dh.sum() + trip.sum()))
    else:
        mean_em = mean_wait = mean_q = mean_dh = dh_frac = math.nan
    if defined:
        E_N = float(normalized_savings(result, saving_scale).sum() / T)
        R_N = n / T
        obj = alpha * E_N + (1.0 - alpha) * R_N
    else:
        log.warning("T_N is zero; objective undefined")
        E_N = R_N = obj = math.nan
    return SummaryMetrics(
        policy=result.config.policy, n_assignments=n, T_N=T,
        mean_emission_g=mean_em, mean_wait_s=mean_wait, mean_queue_wait_s=mean_q,
        mean_deadhead_km=mean_dh, deadhead_fraction=dh_frac, saving_scale=float(saving_scale),
        E_N=E_N, R_N=R_N, objective=obj, defined=defined,
        fairness=fairness_tables(result),
    )


def fairness_tables(result: SimResult, low_max: float = LOW_EMISSION_MAX,
                    high_min: float = HIGH_EMISSION_MIN) -> Dict[str, Dict[str, float]]:
    """Per emission class: share of all rides (%), and deadhead km as a
    share of the class's total km (%)."""
    rides = {c: 0 for c in EMISSION_CLASSES}
    dh = {c: 0.0 for c in EMISSION_CLASSES}
    km = {c: 0.0 for c in EMISSION_CLASSES}
    for a in result.assignment_log:
        c = classify_emission(a.unit_emission, low_max, high_min)
        rides[c] += 1
        dh[c] += a.deadhead_km
        km[c] += a.deadhead_km + a.trip_km
    total = sum(rides.values())
    out = {}
    for c in EMISSION_CLASSES:
        out[c] = {
            "ride_share_pct": 100.0 * rides[c] / total if total else 0.0,
            "deadhead_share_pct": 100.0 * dh[c] / km[c] if km[c] > 0 else 0.0,
        }
    return out


def write_summary_json(metrics: SummaryMetrics, path, extra: Optional[dict] = None) -> None:
    d = metrics.to_flat_dict()
    if extra:
        d.update(extra)
    with open(path, "w") as f:
        json.dump(d, f, sort_keys=True, indent=1, allow_nan=True)
        f.write("\n")


def write_fairness_csv(rows: Dict[str, Dict[str, Dict[str, float]]], path) -> None:
    """``rows`` maps policy label -> fairness table. Two blocks, one per
    metric, policies as columns."""
    labels = list(rows)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "emission_class"] + labels)
        for metric in ("ride_share_pct", "deadhead_share_pct"):
            for c in ("low", "high", "mid"):
                w.writerow([metric, c] + [f"{rows[p][c][metric]:.1f}" for p in labels])


# ---------------------------------------------------------------------------
# Stationary benchmark and the gap check
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    best_d: float
    obj_best: float
    objectives: Dict[float, float]
    saving_scale: float
    results: Dict[float, SimResult] = field(repr=False)
    alpha: float = 0.75

    @property
    def n_simulations(self) -> int:
        return len(self.results)

    def __iter__(self):
        # unpacks as (best_d, obj_best)
        yield self.best_d
        yield self.obj_best


def stationary_oracle(requests, drivers, cfg: SimConfig, saving_scale: Optional[float] = None) -> OracleResult:
    """Run every fixed limit in the menu and keep the best objective.

    All runs are scored with a common saving scale (pooled over the runs
    unless given). Ties go to the smaller limit.
    """
    results = {}
    for d in sorted(cfg.menu):
        results[d] = run(requests, drivers, replace(cfg, policy=f"fixed:{d:g}", g_hat=None))
    scale = saving_scale_for(list(results.values())) if saving_scale is None else saving_scale
    objectives = {d: summarize(r, cfg.alpha, scale).objective for d, r in results.items()}
    best_d = None
    for d in sorted(objectives):
        if best_d is None or objectives[d] > objectives[best_d]:
            best_d = d
    return OracleResult(best_d, objectives[best_d], objectives, scale, results, cfg.alpha)


def mean_saving_curve(oracle: OracleResult) -> List[float]:
    return [float(np.mean([a.saving_g for a in oracle.results[d].assignment_log]))
            for d in sorted(oracle.results)]


def calibrated_g_hat(oracle: OracleResult) -> tuple:
    """Normalized saving curve measured from the stationary runs, for
    injection as a frozen estimate. Falls back to the log prior if the
    measured curve does not rise from d_min to d_max."""
    raw = mean_saving_curve(oracle)
    try:
        return normalize_curve(raw)
    except ValueError:
        from .core import LimitMenu
        log.warning("calibration curve is degenerate; using the log prior")
        return log_prior(LimitMenu(sorted(oracle.results)))


@dataclass
class BoundReport:
    obj_lara: float
    obj_best_stationary: float
    best_stationary_d: float
    gap_term: float
    slack: float
    mean_r_b_sq: float
    mean_trip_duration_s: float
    q_max: int
    satisfied: bool
    benchmark: str = "best fixed deadhead limit on the realized trace (stand-in for the offline optimum)"

    def to_dict(self) -> dict:
        return asdict(self)


def gap_term(batch_log: Sequence[BatchRecord], trip_durations: Sequence[float], q_max: int) -> float:
    r = np.array([b.r_b for b in batch_log], dtype=float)
    t = float(np.mean(trip_durations))
    return float(np.mean(r ** 2) / (q_max * t))


def check_theorem1(result_lara: SimResult, oracle: OracleResult,
                   batch_log: Optional[Sequence[BatchRecord]] = None,
                   slack_frac: float = DEFAULT_SLACK) -> BoundReport:
    any_fixed = next(iter(oracle.results.values()))
    if result_lara.input_digest != any_fixed.input_digest:
        raise ValueError("LARA run and stationary runs used different requests or drivers")
    lc, oc = result_lara.config, any_fixed.config
    for name in ("menu", "alpha", "batch_duration_s", "speed_kmh"):
        if getattr(lc, name) != getattr(oc, name):
            raise ValueError(f"LARA run and stationary runs disagree on {name}")
    if lc.q_max != oc.q_max:
        raise ValueError("LARA run and stationary runs disagree on q_max")
    if batch_log is None:
        batch_log = result_lara.batch_log
    durations = [a.trip_duration for a in result_lara.assignment_log]
    r = np.array([b.r_b for b in batch_log], dtype=float)
    gap = gap_term(batch_log, durations, lc.q_max)
    obj = summarize(result_lara, oracle.alpha, oracle.saving_scale).objective
    slack = slack_frac * abs(oracle.obj_best)
    return BoundReport(
        obj_lara=obj, obj_best_stationary=oracle.obj_best, best_stationary_d=oracle.best_d,
        gap_term=gap, slack=slack, mean_r_b_sq=float(np.mean(r ** 2)),
        mean_trip_duration_s=float(np.mean(durations)), q_max=lc.q_max,
        satisfied=bool(obj >= oracle.obj_best - gap - slack),
    )
