"""
Command-line experiment runner.

Subcommands::

    deadhead-sim run          one simulation per (policy, seed)
    deadhead-sim sweep        vary one parameter over a grid
    deadhead-sim explore      tabulate the controller's limit choice
    deadhead-sim oracle       stationary benchmark and gap check
    deadhead-sim ingest-check parse a trace CSV and report row counts

Settings resolve in order: built-in defaults, ``--preset``, ``--config``
(a JSON object), then explicit flags. The resolved spec is written to
``<out>/spec.json`` next to the results.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Sequence

from .core import LimitMenu
from .engine import SimConfig, SimulationError, run, write_assignment_csv, write_batch_csv
from .evaluate import (calibrated_g_hat, check_theorem1, fairness_tables, saving_scale_for,
                       stationary_oracle, summarize, write_fairness_csv, write_summary_json)
from .ingest import IngestConfig, IngestError, build_fleet, load_requests
from .policy import ControllerState, log_prior, make_policy, select_limit
from .tracegen import SyntheticConfig, generate_drivers, generate_requests

log = logging.getLogger("deadhead_sim")

MODES = ("run", "sweep", "explore", "oracle")
SWEEP_PARAMS = ("batch_duration", "num_drivers", "trip_mean_km", "alpha")
SUMMARY_HEADER = ["policy", "param", "value", "seed", "mean_emission_g", "mean_wait_s", "E_N", "R_N", "objective"]


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    mode: str = "run"
    source: str = "synthetic"
    csv_path: Optional[str] = None
    policies: List[str] = field(default_factory=lambda: ["lara"])
    param: Optional[str] = None
    values: List[float] = field(default_factory=list)
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = "out"
    batch_duration_s: float = 120.0
    num_drivers: int = 500
    num_requests: int = 50_000
    interarrival_s: float = 5.0
    trip_mean_km: float = 15.0
    alpha: float = 0.75
    q_max: int = 240
    menu: List[float] = field(default_factory=lambda: [1, 2, 5, 10, 15, 30])
    speed_kmh: float = 30.0
    emission_assignment: str = "sample_uniform(70,300)"
    queue_len_max: Optional[int] = None  # explore: defaults to q_max
    workers: int = 1

    def validate(self) -> "ExperimentSpec":
        if self.mode not in MODES:
            raise SpecError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.source not in ("synthetic", "csv"):
            raise SpecError(f"source must be synthetic or csv, got {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise SpecError("source csv requires csv_path (--csv)")
        if not self.policies:
            raise SpecError("policy list must be non-empty")
        for p in self.policies:
            try:
                make_policy(p)
            except ValueError as e:
                raise SpecError(str(e)) from None
        if not self.seeds:
            raise SpecError("seed list must be non-empty")
        if self.mode == "sweep":
            if self.param not in SWEEP_PARAMS:
                raise SpecError(f"sweep param must be one of {SWEEP_PARAMS}, got {self.param!r}")
            if not self.values:
                raise SpecError("sweep value grid must be non-empty")
        elif self.param is not None and self.param not in SWEEP_PARAMS:
            raise SpecError(f"param must be one of {SWEEP_PARAMS}, got {self.param!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise SpecError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.param == "alpha" and any(not 0.0 <= v <= 1.0 for v in self.values):
            raise SpecError(f"alpha values must lie in [0,1], got {self.values}")
        checks = [
            ("batch_duration_s", self.batch_duration_s > 0, "> 0"),
            ("num_drivers", self.num_drivers > 0, "> 0"),
            ("num_requests", self.num_requests > 0, "> 0"),
            ("interarrival_s", self.interarrival_s > 0, "> 0"),
            ("trip_mean_km", self.trip_mean_km > 0, "> 0"),
            ("q_max", self.q_max > 0, "> 0"),
            ("speed_kmh", self.speed_kmh > 0, "> 0"),
            ("workers", self.workers >= 1, ">= 1"),
        ]
        for name, ok, rule in checks:
            if not ok:
                raise SpecError(f"{name} must be {rule}, got {getattr(self, name)}")
        try:
            LimitMenu(self.menu)
        except ValueError as e:
            raise SpecError(str(e)) from None
        return self


PRESETS = {
    "fig1-limits": dict(mode="run", policies=[f"fixed:{d}" for d in (1, 2, 5, 10, 15, 30)]),
    "fig3-batch-duration": dict(mode="sweep", param="batch_duration", values=[60, 120, 240, 480],
                                policies=["lara", "cd", "eg"], seeds=[0, 1, 2]),
    "fig4-drivers": dict(mode="sweep", param="num_drivers", values=[310, 400, 480, 550],
                         policies=["lara", "cd", "eg"], seeds=[0, 1, 2]),
    "fig5-trip-distance": dict(mode="sweep", param="trip_mean_km", values=[5, 10, 15, 20, 25],
                               policies=["lara", "cd", "eg"], seeds=[0, 1, 2]),
    "fig6-dataset": dict(mode="sweep", source="csv", param="alpha", values=[0.25, 0.5, 0.75],
                         policies=["lara", "cd", "eg"], num_drivers=100, seeds=[0]),
}

_SPEC_FIELDS = {f.name for f in fields(ExperimentSpec)}


def _merge(spec: ExperimentSpec, values: dict, origin: str) -> ExperimentSpec:
    unknown = sorted(set(values) - _SPEC_FIELDS)
    if unknown:
        raise SpecError(f"unknown key in {origin}: {unknown[0]}")
    for k, v in values.items():
        _check_type(k, v, origin)
    return replace(spec, **values)


_NUMBER_FIELDS = {"batch_duration_s", "interarrival_s", "trip_mean_km", "alpha", "speed_kmh"}
_INT_FIELDS = {"num_drivers", "num_requests", "q_max", "workers", "queue_len_max"}
_LIST_FIELDS = {"policies": str, "values": (int, float), "seeds": int, "menu": (int, float)}


def _check_type(key, value, origin):
    def num(x, kinds):
        return isinstance(x, kinds) and not isinstance(x, bool)
    ok = True
    if key in _NUMBER_FIELDS:
        ok = num(value, (int, float))
    elif key in _INT_FIELDS:
        ok = num(value, int) or (value is None and key == "queue_len_max")
    elif key in _LIST_FIELDS:
        kinds = _LIST_FIELDS[key]
        ok = isinstance(value, list) and all(num(x, kinds) if kinds is not str else isinstance(x, str)
                                             for x in value)
    elif key in ("mode", "source", "output_dir", "emission_assignment"):
        ok = isinstance(value, str)
    elif key in ("csv_path", "param"):
        ok = value is None or isinstance(value, str)
    if not ok:
        raise SpecError(f"bad type for {key} in {origin}: {value!r}")


def parse_config(argv: Sequence[str]) -> ExperimentSpec:
    """Parse a command line (subcommand first) into a validated spec."""
    args = build_parser().parse_args(argv)
    return spec_from_args(args)


def spec_from_args(args) -> ExperimentSpec:
    spec = ExperimentSpec(mode=args.command)
    if args.preset:
        if args.preset not in PRESETS:
            raise SpecError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        spec = _merge(spec, PRESETS[args.preset], "preset")
    if args.config:
        try:
            with open(args.config) as f:
                data = json.load(f)
        except OSError as e:
            raise SpecError(f"cannot read config {args.config}: {e}") from None
        except json.JSONDecodeError as e:
            raise SpecError(f"config {args.config} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise SpecError("config file must hold a JSON object")
        spec = _merge(spec, data, "config file")
    flags = {
        "source": args.source, "csv_path": args.csv, "policies": args.policy, "param": args.param,
        "values": args.values, "seeds": args.seed, "output_dir": args.out,
        "batch_duration_s": args.batch_duration_s, "num_drivers": args.drivers,
        "num_requests": args.requests, "interarrival_s": args.interarrival_s,
        "trip_mean_km": args.trip_mean_km, "alpha": args.alpha, "q_max": args.qmax,
        "menu": args.menu, "speed_kmh": args.speed_kmh, "emission_assignment": args.emission_assignment,
        "queue_len_max": args.queue_len_max, "workers": args.workers,
    }
    if args.csv and args.source is None:
        flags["source"] = "csv"
    spec = replace(spec, **{k: v for k, v in flags.items() if v is not None})
    # the subcommand decides the mode whatever the preset or file says
    spec = replace(spec, mode=args.command)
    spec.workers = min(spec.workers, _env_workers())
    return spec.validate()


def _env_workers() -> int:
    raw = os.environ.get("DEADHEAD_SIM_WORKERS")
    if raw is None:
        return 1 << 30
    try:
        n = int(raw)
    except ValueError:
        raise SpecError(f"DEADHEAD_SIM_WORKERS must be an integer, got {raw!r}") from None
    return max(1, n)


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--config", help="JSON file with ExperimentSpec keys")
    common.add_argument("--source", choices=["synthetic", "csv"])
    common.add_argument("--csv", help="request trace for --source csv")
    common.add_argument("--policy", action="append",
                        help="lara, cd, eg, random or fixed:<km>; repeat to compare")
    common.add_argument("--param", choices=SWEEP_PARAMS, help="swept parameter")
    common.add_argument("--values", type=_float_list, help="sweep grid, e.g. 60,120,240")
    common.add_argument("--seed", type=int, action="append", help="repeat for several seeds")
    common.add_argument("--out", help="output directory")
    common.add_argument("--batch-duration-s", type=float)
    common.add_argument("--drivers", type=int)
    common.add_argument("--requests", type=int, help="synthetic request count")
    common.add_argument("--interarrival-s", type=float)
    common.add_argument("--trip-mean-km", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--qmax", type=int)
    common.add_argument("--menu", type=_float_list, help="deadhead limits in km, e.g. 1,2,5,10,15,30")
    common.add_argument("--speed-kmh", type=float)
    common.add_argument("--emission-assignment", help="csv fleet emissions (ingest syntax)")
    common.add_argument("--queue-len-max", type=int, help="explore: largest queue length")
    common.add_argument("--workers", type=int, help="parallel simulations (capped by DEADHEAD_SIM_WORKERS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deadhead-sim", description="Batched ride-hailing dispatch simulator.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [("run", "simulate each policy and seed"),
                       ("sweep", "vary one parameter over a grid"),
                       ("explore", "tabulate the controller's limit choice"),
                       ("oracle", "best fixed limit and the gap check"),
                       ("ingest-check", "parse a trace CSV and report counts")]:
        sub.add_parser(name, parents=[common], help=text)
    return p


# ---------------------------------------------------------------------------
# Building inputs
# ---------------------------------------------------------------------------

def _apply(spec: ExperimentSpec, param: Optional[str], value) -> ExperimentSpec:
    if param is None:
        return spec
    key = {"batch_duration": "batch_duration_s", "num_drivers": "num_drivers",
           "trip_mean_km": "trip_mean_km", "alpha": "alpha"}[param]
    if key == "num_drivers":
        value = int(value)
    return replace(spec, **{key: value})


def build_inputs(spec: ExperimentSpec, seed: int):
    if spec.source == "csv":
        icfg = IngestConfig(spec.csv_path, driver_count=spec.num_drivers,
                            emission_assignment=spec.emission_assignment, seed=seed)
        requests, report = load_requests(icfg)
        if not requests:
            raise SpecError(f"no usable requests in {spec.csv_path}")
        return requests, build_fleet(icfg, requests, report)
    scfg = SyntheticConfig(seed=seed, num_requests=spec.num_requests, interarrival_s=spec.interarrival_s,
                           trip_mean_km=spec.trip_mean_km, num_drivers=spec.num_drivers)
    return generate_requests(scfg), generate_drivers(scfg)


def sim_config(spec: ExperimentSpec, policy: str, seed: int) -> SimConfig:
    return SimConfig(batch_duration_s=spec.batch_duration_s, speed_kmh=spec.speed_kmh, q_max=spec.q_max,
                     alpha=spec.alpha, menu=LimitMenu(spec.menu), policy=policy, seed=seed)


def _fmt_value(v) -> str:
    if v is None:
        return ""
    return f"{v:g}" if isinstance(v, float) else str(v)


def _safe(policy: str) -> str:
    return policy.replace(":", "-")


# ---------------------------------------------------------------------------
# Cells: one (value, seed) pair, all policies on identical inputs
# ---------------------------------------------------------------------------

def run_cell(spec: ExperimentSpec, param, value, seed) -> List[dict]:
    cell = _apply(spec, param, value)
    requests, drivers = build_inputs(cell, seed)
    results = {}
    for pol in cell.policies:
        try:
            results[pol] = run(requests, drivers, sim_config(cell, pol, seed))
        except SimulationError as e:
            raise SimulationError(f"[policy={pol} {param or 'param'}={_fmt_value(value)} seed={seed}] {e}") from e
    # one saving scale per cell so policies are scored on the same footing
    scale = saving_scale_for(list(results.values()))
    tag = f"{param}={_fmt_value(value)}_" if param else ""
    rows, fair = [], {}
    for pol, res in results.items():
        d = os.path.join(cell.output_dir, "runs", f"{tag}seed={seed}", _safe(pol))
        os.makedirs(d, exist_ok=True)
        write_batch_csv(res, os.path.join(d, "batches.csv"))
        write_assignment_csv(res, os.path.join(d, "assignments.csv"))
        m = summarize(res, cell.alpha, scale)
        write_summary_json(m, os.path.join(d, "summary.json"),
                           extra={"seed": seed, "param": param or "", "value": _fmt_value(value)})
        fair[pol] = fairness_tables(res)
        rows.append({"policy": pol, "param": param or "", "value": _fmt_value(value), "seed": seed,
                     "mean_emission_g": m.mean_emission_g, "mean_wait_s": m.mean_wait_s,
                     "E_N": m.E_N, "R_N": m.R_N, "objective": m.objective})
    write_fairness_csv(fair, os.path.join(cell.output_dir, "runs", f"{tag}seed={seed}", "fairness.csv"))
    return rows


def _run_cell_args(a):
    return run_cell(*a)


def run_grid(spec: ExperimentSpec) -> List[dict]:
    grid = spec.values if spec.param else [None]
    jobs = [(spec, spec.param, v, s) for v in grid for s in spec.seeds]
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(spec.workers, len(jobs))) as ex:
            parts = list(ex.map(_run_cell_args, jobs))
    else:
        parts = [run_cell(*j) for j in jobs]
    rows = [r for part in parts for r in part]
    order = {p: i for i, p in enumerate(spec.policies)}
    rows.sort(key=lambda r: (order[r["policy"]], float(r["value"]) if r["value"] else 0.0, r["seed"]))
    return rows


def write_sweep_summary(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in SUMMARY_HEADER])


AGGREGATE_HEADER = ["policy", "param", "value", "n_seeds", "mean_emission_g_mean", "mean_emission_g_sd",
                    "mean_wait_s_mean", "mean_wait_s_sd", "objective_mean", "objective_sd"]


def aggregate_rows(rows: List[dict]) -> List[dict]:
    """Mean and sample sd across seeds for each (policy, param value)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["policy"], r["param"], r["value"]), []).append(r)
    out = []
    for (pol, param, value), rs in groups.items():
        agg = {"policy": pol, "param": param, "value": value, "n_seeds": len(rs)}
        for k in ("mean_emission_g", "mean_wait_s", "objective"):
            xs = [x[k] for x in rs]
            agg[f"{k}_mean"] = statistics.fmean(xs)
            agg[f"{k}_sd"] = statistics.stdev(xs) if len(xs) > 1 else 0.0
        out.append(agg)
    return out


def explore_table(spec: ExperimentSpec) -> List[dict]:
    """Limit chosen by the controller for each (alpha, queue length), with
    the log prior curve and mean trip ``trip_mean_km``."""
    menu = LimitMenu(spec.menu)
    alphas = spec.values if spec.param == "alpha" and spec.values else [spec.alpha]
    top = spec.q_max if spec.queue_len_max is None else spec.queue_len_max
    rows = []
    for a in alphas:
        state = ControllerState(spec.q_max, a, menu, log_prior(menu))
        for n in range(top + 1):
            rows.append({"alpha": a, "queue_len": n, "q_max": spec.q_max,
                         "chosen_d": select_limit(state, n, spec.trip_mean_km)})
    return rows


def run_oracle(spec: ExperimentSpec, seed: int) -> dict:
    requests, drivers = build_inputs(spec, seed)
    cfg = sim_config(spec, "lara", seed)
    oracle = stationary_oracle(requests, drivers, cfg)
    g = calibrated_g_hat(oracle)
    lara = run(requests, drivers, replace(cfg, g_hat=g))
    report = check_theorem1(lara, oracle)
    out = report.to_dict()
    out.update({"seed": seed, "g_hat": list(g),
                "stationary_objectives": {f"{d:g}": v for d, v in sorted(oracle.objectives.items())}})
    return out


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _echo_spec(spec: ExperimentSpec) -> None:
    os.makedirs(spec.output_dir, exist_ok=True)
    with open(os.path.join(spec.output_dir, "spec.json"), "w") as f:
        json.dump(asdict(spec), f, indent=1, sort_keys=True)
        f.write("\n")


def _ingest_check(args) -> int:
    if not args.csv:
        print("ingest-check requires --csv", file=sys.stderr)
        return 2
    try:
        _, report = load_requests(IngestConfig(args.csv))
    except IngestError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(report.to_json())
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "ingest-check":
        return _ingest_check(args)
    try:
        spec = spec_from_args(args)
    except SpecError as e:
        parser.error(str(e))
    _echo_spec(spec)
    try:
        if spec.mode in ("run", "sweep"):
            rows = run_grid(spec)
            path = os.path.join(spec.output_dir, "sweep_summary.csv")
            write_sweep_summary(rows, path)
            agg = aggregate_rows(rows)
            with open(os.path.join(spec.output_dir, "sweep_aggregate.csv"), "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(AGGREGATE_HEADER)
                for r in agg:
                    w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in AGGREGATE_HEADER])
            for r in rows:
                print(f"{r['policy']:10s} {r['param'] or '-'}={r['value'] or '-':>6s} seed={r['seed']} "
                      f"emission={r['mean_emission_g']:.1f}g wait={r['mean_wait_s']:.0f}s "
                      f"obj={r['objective']:.4g}")
        elif spec.mode == "explore":
            rows = explore_table(spec)
            path = os.path.join(spec.output_dir, "explore.csv")
            with open(path, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=["alpha", "q_max", "queue_len", "chosen_d"], lineterminator="\n")
                w.writeheader()
                for r in rows:
                    w.writerow({**r, "alpha": f"{r['alpha']:g}", "chosen_d": f"{r['chosen_d']:g}"})
            print(f"wrote {len(rows)} rows to {path}")
        else:
            reports = [run_oracle(spec, s) for s in spec.seeds]
            path = os.path.join(spec.output_dir, "bound_report.json")
            with open(path, "w") as f:
                json.dump(reports if len(reports) > 1 else reports[0], f, indent=1, sort_keys=True)
                f.write("\n")
            for r in reports:
                print(f"seed={r['seed']} obj_lara={r['obj_lara']:.6g} obj_best={r['obj_best_stationary']:.6g} "
                      f"(d={r['best_stationary_d']:g}) gap={r['gap_term']:.3g} satisfied={r['satisfied']}")
    except (SimulationError, IngestError, SpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
