"""Command-line front end: single runs, paired comparisons and factorial experiments.

Usage::

    twinflow run --config scenario.json --dialect A --seed 3 --out runs/
    twinflow compare --config scenario.json --seed 3 --out runs/
    twinflow experiment --plan plan.json --workers 4
"""
from __future__ import annotations

import argparse
import csv
import functools
import hashlib
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .behavior import CAR_FOLLOWING_MODELS, ModelParams
from .demand import AGGRESSIVENESS_TYPES, GAP_TOLERANCE_LEVELS, DriverProfile, build_demand, convert_flows
from .engine import EngineConfig, run
from .metrics import MEASURES, equivalence_report, report_to_csv, write_observations
from .network import RoadNetwork, generate_arterial, generate_grid, load_network
from .stats import (
    FactorLevels,
    StatsError,
    build_design_matrix,
    nested_f_test,
    ols_fit,
    one_sample_t,
)

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "ExperimentPlan",
    "load_scenario",
    "load_plan",
    "build_network",
    "build_flows",
    "cell_seed",
    "resolve_workers",
    "cmd_run",
    "cmd_compare",
    "cmd_experiment",
    "main",
]

WORKERS_ENV = "TWINFLOW_WORKERS"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScenarioConfig:
    """A network, a demand and a driver population.

    ``network`` is either ``{"file": path}`` or a generator spec such as
    ``{"generator": "grid", "rows": 2, "cols": 2, "lanes_per_direction": 2}``.
    ``demand`` is either ``{"file": path, "format"?: ...}`` or
    ``{"pattern": "uniform", "vehicles": 600}``.
    """

    name: str = "scenario"
    network: dict = field(default_factory=lambda: {"generator": "grid", "rows": 2, "cols": 2})
    demand: dict = field(default_factory=lambda: {"pattern": "uniform", "vehicles": 100})
    profile: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    dt: float = 1.0
    horizon: float = 3600.0
    base_dir: str = "."

    def driver_profile(self) -> DriverProfile:
        spec = dict(self.profile)
        spec["params"] = {**spec.get("params", {}), **self.params}
        return DriverProfile.from_dict(spec)


@dataclass(frozen=True)
class ExperimentPlan:
    name: str = "experiment"
    car_following: tuple[str, ...] = CAR_FOLLOWING_MODELS
    aggressiveness: tuple[str, ...] = tuple(AGGRESSIVENESS_TYPES)
    gap_tolerance: tuple[float, ...] = GAP_TOLERANCE_LEVELS
    networks: tuple[tuple[str, dict], ...] = (
        ("grid", {"generator": "grid", "rows": 2, "cols": 2, "lanes_per_direction": 2}),
    )
    replications: int = 1
    base_seed: int = 0
    horizon: float = 600.0
    dt: float = 1.0
    vehicles: int = 100
    demand_pattern: str = "uniform"
    params: dict = field(default_factory=dict)
    tail: str = "two"
    output_dir: str = "results"
    base_dir: str = "."

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        for name in ("car_following", "aggressiveness", "gap_tolerance", "networks"):
            if not getattr(self, name):
                raise ConfigError(f"factor grid {name!r} is empty")
        names = [n for n, _ in self.networks]
        if len(set(names)) != len(names):
            raise ConfigError("network names must be unique")

    def cells(self) -> list[FactorLevels]:
        return [
            FactorLevels(c, a, float(g), r)
            for c, a, g, (r, _) in itertools.product(
                self.car_following, self.aggressiveness, self.gap_tolerance, self.networks
            )
        ]

    def network_spec(self, name: str) -> dict:
        return dict(self.networks)[name]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["networks"] = {n: s for n, s in self.networks}
        d.pop("base_dir")
        return d


def _read_json(path: str | Path) -> Any:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"file not found: {p}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _check_keys(d: Mapping, allowed: set[str], where: str) -> None:
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _check_params(params: Mapping) -> None:
    known = {f.name for f in fields(ModelParams)}
    extra = set(params) - known
    if extra:
        raise ConfigError(f"unknown model parameters {sorted(extra)}")


def load_scenario(path: str | Path) -> ScenarioConfig:
    d = _read_json(path)
    if not isinstance(d, dict):
        raise ConfigError("scenario config must be a JSON object")
    allowed = {f.name for f in fields(ScenarioConfig)} - {"base_dir"}
    _check_keys(d, allowed, str(path))
    _check_params(d.get("params", {}))
    return ScenarioConfig(**d, base_dir=str(Path(path).resolve().parent))


def load_plan(path: str | Path) -> ExperimentPlan:
    d = _read_json(path)
    if not isinstance(d, dict):
        raise ConfigError("experiment plan must be a JSON object")
    allowed = {f.name for f in fields(ExperimentPlan)} - {"base_dir"}
    _check_keys(d, allowed, str(path))
    _check_params(d.get("params", {}))
    d = dict(d)
    for key in ("car_following", "aggressiveness", "gap_tolerance"):
        if key in d:
            d[key] = tuple(d[key])
    if "networks" in d:
        nets = d["networks"]
        if isinstance(nets, dict):
            d["networks"] = tuple((str(k), v) for k, v in nets.items())
        else:
            d["networks"] = tuple((str(n["name"]), {k: v for k, v in n.items() if k != "name"}) for n in nets)
    plan = ExperimentPlan(**d, base_dir=str(Path(path).resolve().parent))
    plan.cells()  # validates every factor level
    return plan


_GENERATORS = {"grid": generate_grid, "arterial": generate_arterial}


def build_network(spec: Mapping, base_dir: str = ".") -> RoadNetwork:
    spec = dict(spec)
    if "file" in spec:
        path = Path(base_dir) / spec["file"]
        try:
            return load_network(path.read_bytes())
        except FileNotFoundError:
            raise ConfigError(f"network file not found: {path}") from None
    spec.pop("demand", None)  # per-network demand override used by experiment plans
    gen = spec.pop("generator", "grid")
    if gen not in _GENERATORS:
        raise ConfigError(f"unknown network generator {gen!r}")
    try:
        return _GENERATORS[gen](**spec)
    except TypeError as exc:
        raise ConfigError(f"bad {gen} network spec: {exc}") from None


def build_flows(cfg: ScenarioConfig, net: RoadNetwork, seed: int, profile: DriverProfile | None = None):
    profile = profile or cfg.driver_profile()
    spec = dict(cfg.demand)
    if "file" in spec:
        doc = _read_json(Path(cfg.base_dir) / spec["file"])
        return convert_flows(doc, profile, spec.get("format"))
    return build_demand(
        net,
        spec.get("pattern", "uniform"),
        int(spec.get("vehicles", 0)),
        float(spec.get("horizon", cfg.horizon)),
        seed=int(spec.get("seed", seed)),
        profile=profile,
    )


def cell_seed(base_seed: int, cell_index: int, replication: int) -> int:
    """64-bit seed derived from (base seed, cell, replication) only."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(cell_index), int(replication)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def resolve_workers(arg: int | None, default: int = 1) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    elif arg is not None:
        value = arg
    else:
        value = default
    if value < 1:
        raise ConfigError("worker count must be >= 1")
    return value


# ---------------------------------------------------------------------------
# commands


def _engine(cfg: ScenarioConfig, dialect: str, seed: int, workers: int) -> EngineConfig:
    return EngineConfig(dialect=dialect, dt=cfg.dt, horizon=cfg.horizon, seed=seed, worker_count=workers)


def cmd_run(config: str | Path, dialect: str, seed: int, out: str | Path, workers: int = 1) -> dict:
    cfg = load_scenario(config)
    net = build_network(cfg.network, cfg.base_dir)
    flows = build_flows(cfg, net, seed)
    obs, summary = run(net, flows, _engine(cfg, dialect, seed, workers))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.name}_{dialect}_s{seed}"
    with open(out / f"{stem}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        write_observations(fh, obs, {"scenario": cfg.name, "dialect": dialect, "seed": seed, "dt": cfg.dt})
    summary_d = summary.to_dict()
    (out / f"{stem}_summary.json").write_text(json.dumps(summary_d, indent=1) + "\n", encoding="utf-8")
    return summary_d


def cmd_compare(
    config: str | Path,
    seed: int,
    out: str | Path,
    workers: int = 1,
    self_pair: str | None = None,
    smoothing: float = 1e-6,
    global_rmse: bool = False,
):
    cfg = load_scenario(config)
    net = build_network(cfg.network, cfg.base_dir)
    flows = build_flows(cfg, net, seed)
    da, db = (self_pair, self_pair) if self_pair else ("A", "B")
    obs_a, _ = run(net, flows, _engine(cfg, da, seed, workers))
    obs_b = obs_a if self_pair else run(net, flows, _engine(cfg, db, seed, workers))[0]
    rep = equivalence_report(
        obs_a, obs_b, smoothing=smoothing, global_rmse=global_rmse,
        scenario=cfg.name, seed=seed, dialect_a=da, dialect_b=db,
    )
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.name}_{da}{db}_s{seed}"
    (out / f"{stem}_report.csv").write_text(report_to_csv([rep]), encoding="utf-8")
    (out / f"{stem}_report.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    return rep


# -- experiment ---------------------------------------------------------------

CELL_FIELDS = (
    "cell", "replication", "seed", "car_following", "aggressiveness", "gap_tolerance", "network",
) + MEASURES + ("coverage_time", "coverage_kinematic")


@functools.lru_cache(maxsize=8)
def _cached_network(spec_json: str, base_dir: str) -> RoadNetwork:
    return build_network(json.loads(spec_json), base_dir)


def _run_cell(plan: ExperimentPlan, cell_index: int, cell: FactorLevels, rep: int) -> dict:
    seed = cell_seed(plan.base_seed, cell_index, rep)
    row: dict[str, Any] = {
        "cell": cell_index,
        "replication": rep,
        "seed": seed,
        "car_following": cell.car_following,
        "aggressiveness": cell.aggressiveness,
        "gap_tolerance": cell.gap_tolerance,
        "network": cell.network,
    }
    try:
        net = _cached_network(json.dumps(plan.network_spec(cell.network), sort_keys=True), plan.base_dir)
        profile = DriverProfile.from_label(
            cell.aggressiveness,
            car_following=cell.car_following,
            gap_tolerance=cell.gap_tolerance,
            params=ModelParams(**plan.params),
        )
        demand = plan.network_spec(cell.network).get("demand", {})
        flows = build_demand(
            net,
            demand.get("pattern", plan.demand_pattern),
            int(demand.get("vehicles", plan.vehicles)),
            plan.horizon,
            seed=seed,
            profile=profile,
        )
        obs = {}
        for d in ("A", "B"):
            obs[d], _ = run(net, flows, EngineConfig(dialect=d, dt=plan.dt, horizon=plan.horizon, seed=seed))
        rep_ = equivalence_report(obs["A"], obs["B"], seed=seed)
        row.update(rep_.to_dict())
        row = {k: row[k] for k in CELL_FIELDS}
        row["error"] = ""
    except Exception as exc:  # recorded in the manifest, never silently dropped
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _run_task(args) -> dict:
    return _run_cell(*args)


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _regressions(plan: ExperimentPlan, rows: list[dict], outdir: Path, manifest: dict) -> None:
    cells = [FactorLevels(r["car_following"], r["aggressiveness"], r["gap_tolerance"], r["network"]) for r in rows]
    design = build_design_matrix(cells, "inference", networks=[n for n, _ in plan.networks])
    keep = np.any(design.X != 0.0, axis=0)
    X = design.X[:, keep]
    labels = [lab for lab, k in zip(design.labels, keep) if k]
    rank = int(np.linalg.matrix_rank(X))
    if len(rows) <= rank:
        manifest["notices"].append(
            f"regression skipped: {len(rows)} rows is too few for {rank} estimable terms"
        )
        return
    lr_cols = [i for i, lab in enumerate(labels) if lab.startswith("L:")]
    fits = {}
    for m in MEASURES:
        y = np.array([r[m] for r in rows], dtype=float)
        model = ols_fit(X, y, labels)
        _write_csv(
            outdir / f"regression_{m}.csv",
            ("term", "estimate", "std_error", "t", "p"),
            [(t["term"], t["estimate"], t["std_error"], t["t"], t["p"]) for t in model.table()],
        )
        info = {"r_squared": model.r_squared, "adj_r_squared": model.adj_r_squared,
                "n": model.n, "rank": model.rank, "rank_deficient": model.rank_deficient}
        if lr_cols:
            reduced_cols = [i for i in range(X.shape[1]) if i not in lr_cols]
            reduced = ols_fit(X[:, reduced_cols], y, [labels[i] for i in reduced_cols])
            try:
                F, p, d1, d2 = nested_f_test(model, reduced)
                info["lr_interaction"] = {"F": F, "p": p, "df_num": d1, "df_den": d2}
            except StatsError as exc:
                info["lr_interaction"] = {"error": str(exc)}
        fits[m] = info
    manifest["regressions"] = fits


def cmd_experiment(plan_path: str | Path, out: str | Path | None = None, workers: int | None = None) -> int:
    """Run the factorial plan; returns the process exit code."""
    plan = load_plan(plan_path)
    cells = plan.cells()
    n_workers = resolve_workers(workers, default=min(os.cpu_count() or 1, len(cells)))
    root = Path(out) if out is not None else Path(plan.base_dir) / plan.output_dir
    outdir = root / plan.name
    outdir.mkdir(parents=True, exist_ok=True)

    tasks = [(plan, i, cell, rep) for i, cell in enumerate(cells) for rep in range(plan.replications)]
    if n_workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=1))
    else:
        results = [_run_task(t) for t in tasks]

    ok = [r for r in results if not r["error"]]
    failed = [
        {"cell": r["cell"], "replication": r["replication"], "seed": r["seed"], "error": r["error"]}
        for r in results if r["error"]
    ]
    manifest: dict[str, Any] = {
        "experiment": plan.name,
        "plan": plan.to_dict(),
        "cells": len(cells),
        "replications": plan.replications,
        "rows": len(ok),
        "failed": failed,
        "notices": [],
    }
    _write_csv(outdir / "cells.csv", CELL_FIELDS, [[r[k] for k in CELL_FIELDS] for r in ok])

    trows = []
    for m in MEASURES:
        values = [r[m] for r in ok]
        try:
            t = one_sample_t(values, 0.0, plan.tail)
            trows.append((m, t.n, t.mean, t.std, t.t, t.df, t.p, ""))
        except StatsError as exc:
            trows.append((m, len(values), float(np.mean(values)) if values else "", "", "", "", "", str(exc)))
    _write_csv(outdir / "ttests.csv", ("measure", "n", "mean", "std", "t", "df", "p", "note"), trows)

    if ok:
        _regressions(plan, ok, outdir, manifest)
    files = sorted(p.name for p in outdir.iterdir() if p.name != "manifest.json")
    manifest["files"] = {name: _sha256(outdir / name) for name in files}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for notice in manifest["notices"]:
        print(f"twinflow: notice: {notice}", file=sys.stderr)
    if failed:
        print(f"twinflow: {len(failed)} of {len(tasks)} comparisons failed; see manifest.json", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twinflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True, help="scenario JSON file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=None,
                        help=f"worker threads (overridden by ${WORKERS_ENV})")
        sp.add_argument("--out", default="runs", help="output directory")

    r = sub.add_parser("run", help="simulate one dialect and write its observation stream")
    common(r)
    r.add_argument("--dialect", choices=("A", "B"), default="A")

    c = sub.add_parser("compare", help="run both dialects with paired seeds and report equivalence")
    common(c)
    c.add_argument("--self-pair", choices=("A", "B"), default=None,
                   help="compare one dialect against itself")
    c.add_argument("--epsilon", type=float, default=1e-6, help="KL smoothing per lane")
    c.add_argument("--global-rmse", action="store_true", help="pool RMSE terms over all steps")

    e = sub.add_parser("experiment", help="run a factorial plan of paired comparisons")
    e.add_argument("--plan", required=True, help="experiment plan JSON file")
    e.add_argument("--workers", type=int, default=None)
    e.add_argument("--out", default=None, help="results root (default: the plan's output_dir)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            s = cmd_run(args.config, args.dialect, args.seed, args.out, resolve_workers(args.workers))
            print(json.dumps(s))
        elif args.command == "compare":
            rep = cmd_compare(
                args.config, args.seed, args.out, resolve_workers(args.workers),
                self_pair=args.self_pair, smoothing=args.epsilon, global_rmse=args.global_rmse,
            )
            print(rep.to_json())
        else:
            return cmd_experiment(args.plan, args.out, args.workers)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"twinflow: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
