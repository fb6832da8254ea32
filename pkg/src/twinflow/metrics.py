"""Per-step observations and paired-run equivalence measures.

Six RMSE measures (travel time, waiting time, lane count, queued count,
speed, acceleration) and two KL divergences (lane count, queued count)
compare the observation streams of two runs over the same network.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

__all__ = [
    "QUEUE_SPEED",
    "VehicleRecord",
    "ArrivalNote",
    "StepObservation",
    "EquivalenceReport",
    "MetricsError",
    "NoOverlapError",
    "observe_step",
    "rmse_report",
    "kl_report",
    "kl_divergence",
    "equivalence_report",
    "REPORT_FIELDS",
    "MEASURES",
    "report_to_csv",
    "write_observations",
    "read_observations",
    "dumps_observations",
]

QUEUE_SPEED = 0.1  # m/s, strict: queued iff speed < QUEUE_SPEED
DEFAULT_EPSILON = 1e-6


class MetricsError(ValueError):
    pass


class NoOverlapError(MetricsError):
    """No vehicle was ever matched between the two runs."""


@dataclass(frozen=True)
class VehicleRecord:
    vehicle_id: str
    speed: float
    accel: float
    travel_time: float
    waiting_time: float
    lane_id: str


@dataclass(frozen=True)
class ArrivalNote:
    """Final totals of a vehicle that left the network during the step."""

    vehicle_id: str
    travel_time: float
    waiting_time: float


@dataclass(frozen=True)
class StepObservation:
    clock: float
    vehicles: tuple[VehicleRecord, ...]
    lane_ids: tuple[str, ...]
    lane_counts: tuple[int, ...]
    queued_counts: tuple[int, ...]
    arrivals: tuple[ArrivalNote, ...] = ()

    def lane_records(self) -> list[tuple[str, int, int]]:
        return list(zip(self.lane_ids, self.lane_counts, self.queued_counts))


def observe_step(world) -> StepObservation:
    """Snapshot the world after a step.

    Shadow copies made during a lane change add to the lane's vehicle count
    but never to its queued count and never appear as vehicle records.
    """
    lane_ids = world.lane_id_tuple if hasattr(world, "lane_id_tuple") else tuple(world.lane_ids())
    counts = []
    queued = []
    records = []
    for lane in world.lanes:
        n = q = 0
        for v in lane.vehicles:
            n += 1
            if v.is_shadow:
                continue
            if v.speed < QUEUE_SPEED:
                q += 1
            records.append(VehicleRecord(v.vid, v.speed, v.accel, v.travel, v.waiting, lane.id))
        counts.append(n)
        queued.append(q)
    records.sort(key=lambda r: r.vehicle_id)
    arrivals = tuple(
        ArrivalNote(a.vehicle_id, a.travel_time, a.waiting_time)
        for a in getattr(world, "step_arrivals", ())
    )
    return StepObservation(
        clock=world.clock,
        vehicles=tuple(records),
        lane_ids=lane_ids,
        lane_counts=tuple(counts),
        queued_counts=tuple(queued),
        arrivals=arrivals,
    )


# ---------------------------------------------------------------------------
# RMSE measures


def _check_pair(run_a: Sequence[StepObservation], run_b: Sequence[StepObservation]) -> None:
    if len(run_a) != len(run_b):
        raise MetricsError(f"streams differ in length: {len(run_a)} vs {len(run_b)}")
    if run_a and run_b and run_a[0].lane_ids != run_b[0].lane_ids:
        if sorted(run_a[0].lane_ids) != sorted(run_b[0].lane_ids):
            raise MetricsError("streams cover different networks")


def _aggregate(sq_sums: list[float], counts: list[int], global_rmse: bool) -> float:
    if global_rmse:
        n = sum(counts)
        return math.sqrt(sum(sq_sums) / n) if n else 0.0
    per_step = [math.sqrt(s / c) for s, c in zip(sq_sums, counts) if c]
    return float(np.mean(per_step)) if per_step else 0.0


def _lane_vectors(obs: StepObservation, order: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    if tuple(order) == obs.lane_ids:
        return np.asarray(obs.lane_counts, float), np.asarray(obs.queued_counts, float)
    pos = {lid: i for i, lid in enumerate(obs.lane_ids)}
    idx = [pos[lid] for lid in order]
    return (
        np.asarray(obs.lane_counts, float)[idx],
        np.asarray(obs.queued_counts, float)[idx],
    )


def rmse_report(
    run_a: Sequence[StepObservation],
    run_b: Sequence[StepObservation],
    global_rmse: bool = False,
) -> dict[str, float]:
    """Six RMSE measures plus coverage fractions.

    Speed and acceleration compare vehicles active in both runs at a step.
    Travel and waiting time compare every vehicle that has departed in both
    runs, holding an arrived vehicle's final totals for the remaining steps.
    Lane measures compare every lane at every step.  By default the RMSE is
    taken per step and averaged over steps; ``global_rmse`` pools all terms.
    """
    _check_pair(run_a, run_b)
    lanes = run_a[0].lane_ids if run_a else ()
    keys = ("travel", "waiting", "count", "queued", "speed", "accel")
    sq = {k: [] for k in keys}
    cnt = {k: [] for k in keys}
    done_a: dict[str, tuple[float, float]] = {}
    done_b: dict[str, tuple[float, float]] = {}
    union_time = union_kin = matched_time = matched_kin = 0
    any_vehicle = False

    for oa, ob in zip(run_a, run_b):
        va = {r.vehicle_id: r for r in oa.vehicles}
        vb = {r.vehicle_id: r for r in ob.vehicles}
        any_vehicle = any_vehicle or bool(va) or bool(vb) or bool(done_a) or bool(done_b)
        for note in oa.arrivals:
            done_a[note.vehicle_id] = (note.travel_time, note.waiting_time)
        for note in ob.arrivals:
            done_b[note.vehicle_id] = (note.travel_time, note.waiting_time)
        any_vehicle = any_vehicle or bool(done_a) or bool(done_b)

        s_sp = s_ac = 0.0
        # iterate in stream order; set order varies with the process hash seed
        both = [vid for vid in va if vid in vb]
        for vid in both:
            ra, rb = va[vid], vb[vid]
            s_sp += (ra.speed - rb.speed) ** 2
            s_ac += (ra.accel - rb.accel) ** 2
        sq["speed"].append(s_sp)
        sq["accel"].append(s_ac)
        cnt["speed"].append(len(both))
        cnt["accel"].append(len(both))
        matched_kin += len(both)
        union_kin += len(va.keys() | vb.keys())

        ta = {vid: (r.travel_time, r.waiting_time) for vid, r in va.items()}
        ta.update(done_a)
        tb = {vid: (r.travel_time, r.waiting_time) for vid, r in vb.items()}
        tb.update(done_b)
        s_tt = s_wt = 0.0
        common = [vid for vid in ta if vid in tb]
        for vid in common:
            (xa, wa), (xb, wb) = ta[vid], tb[vid]
            s_tt += (xa - xb) ** 2
            s_wt += (wa - wb) ** 2
        sq["travel"].append(s_tt)
        sq["waiting"].append(s_wt)
        cnt["travel"].append(len(common))
        cnt["waiting"].append(len(common))
        matched_time += len(common)
        union_time += len(ta.keys() | tb.keys())

        ca, qa = _lane_vectors(oa, lanes)
        cb, qb = _lane_vectors(ob, lanes)
        sq["count"].append(float(np.sum((ca - cb) ** 2)))
        sq["queued"].append(float(np.sum((qa - qb) ** 2)))
        cnt["count"].append(len(lanes))
        cnt["queued"].append(len(lanes))

    if any_vehicle and matched_time == 0 and matched_kin == 0:
        raise NoOverlapError("no vehicle is present in both runs at any step")
    return {
        "rmse_travel_time": _aggregate(sq["travel"], cnt["travel"], global_rmse),
        "rmse_waiting_time": _aggregate(sq["waiting"], cnt["waiting"], global_rmse),
        "rmse_lane_count": _aggregate(sq["count"], cnt["count"], global_rmse),
        "rmse_queued_count": _aggregate(sq["queued"], cnt["queued"], global_rmse),
        "rmse_speed": _aggregate(sq["speed"], cnt["speed"], global_rmse),
        "rmse_accel": _aggregate(sq["accel"], cnt["accel"], global_rmse),
        "coverage_time": matched_time / union_time if union_time else 1.0,
        "coverage_kinematic": matched_kin / union_kin if union_kin else 1.0,
    }


# ---------------------------------------------------------------------------
# KL measures


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(p || q) in nats for two normalized distributions (0 ln 0 = 0)."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if p.shape != q.shape:
        raise MetricsError("distributions differ in support")
    mask = p > 0
    if np.any(q[mask] <= 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _smoothed(counts: np.ndarray, eps: float) -> np.ndarray:
    x = counts + eps
    return x / x.sum()


def kl_report(
    run_a: Sequence[StepObservation],
    run_b: Sequence[StepObservation],
    smoothing: float = DEFAULT_EPSILON,
) -> dict[str, float]:
    """Mean over steps of KL(A || B) between per-lane count distributions."""
    if not smoothing > 0:
        raise MetricsError("smoothing must be > 0")
    _check_pair(run_a, run_b)
    if not run_a:
        return {"kl_count": 0.0, "kl_queued": 0.0}
    lanes = run_a[0].lane_ids
    kc, kq = [], []
    for oa, ob in zip(run_a, run_b):
        ca, qa = _lane_vectors(oa, lanes)
        cb, qb = _lane_vectors(ob, lanes)
        for va, vb, out in ((ca, cb, kc), (qa, qb, kq)):
            if not va.any() and not vb.any():
                out.append(0.0)
            elif np.array_equal(va, vb):
                out.append(0.0)
            else:
                out.append(max(0.0, kl_divergence(_smoothed(va, smoothing), _smoothed(vb, smoothing))))
    return {"kl_count": float(np.mean(kc)), "kl_queued": float(np.mean(kq))}


# ---------------------------------------------------------------------------
# report

MEASURES = (
    "rmse_travel_time",
    "rmse_waiting_time",
    "rmse_lane_count",
    "rmse_queued_count",
    "rmse_speed",
    "rmse_accel",
    "kl_count",
    "kl_queued",
)

REPORT_FIELDS = MEASURES + (
    "coverage_time",
    "coverage_kinematic",
    "steps",
    "scenario",
    "seed",
    "dialect_a",
    "dialect_b",
)


@dataclass(frozen=True)
class EquivalenceReport:
    rmse_travel_time: float
    rmse_waiting_time: float
    rmse_lane_count: float
    rmse_queued_count: float
    rmse_speed: float
    rmse_accel: float
    kl_count: float
    kl_queued: float
    coverage_time: float = 1.0
    coverage_kinematic: float = 1.0
    steps: int = 0
    scenario: str = ""
    seed: int = 0
    dialect_a: str = "A"
    dialect_b: str = "B"

    def measures(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in MEASURES}

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in REPORT_FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def equivalence_report(
    run_a: Sequence[StepObservation],
    run_b: Sequence[StepObservation],
    *,
    smoothing: float = DEFAULT_EPSILON,
    global_rmse: bool = False,
    scenario: str = "",
    seed: int = 0,
    dialect_a: str = "A",
    dialect_b: str = "B",
) -> EquivalenceReport:
    r = rmse_report(run_a, run_b, global_rmse=global_rmse)
    k = kl_report(run_a, run_b, smoothing)
    return EquivalenceReport(
        **r, **k, steps=len(run_a), scenario=scenario, seed=seed,
        dialect_a=dialect_a, dialect_b=dialect_b,
    )


def report_to_csv(reports: Iterable[EquivalenceReport], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(REPORT_FIELDS)
    for rep in reports:
        d = rep.to_dict()
        w.writerow([repr(d[f]) if isinstance(d[f], float) else d[f] for f in REPORT_FIELDS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# line-delimited observation files

OBS_FORMAT = "twinflow-observations"


def _obs_record(obs: StepObservation) -> dict:
    return {
        "t": obs.clock,
        "v": [
            [r.vehicle_id, r.speed, r.accel, r.travel_time, r.waiting_time, r.lane_id]
            for r in obs.vehicles
        ],
        "n": list(obs.lane_counts),
        "q": list(obs.queued_counts),
        "a": [[a.vehicle_id, a.travel_time, a.waiting_time] for a in obs.arrivals],
    }


def write_observations(fh: IO[str], observations: Sequence[StepObservation], meta: dict | None = None) -> None:
    """Write a header line (lanes and metadata) followed by one line per step."""
    lanes = list(observations[0].lane_ids) if observations else []
    header = {"format": OBS_FORMAT, "version": 1, "lanes": lanes, "meta": meta or {}}
    fh.write(json.dumps(header, separators=(",", ":")) + "\n")
    for obs in observations:
        fh.write(json.dumps(_obs_record(obs), separators=(",", ":")) + "\n")


def dumps_observations(observations: Sequence[StepObservation], meta: dict | None = None) -> str:
    buf = io.StringIO()
    write_observations(buf, observations, meta)
    return buf.getvalue()


def read_observations(fh: IO[str]) -> tuple[list[StepObservation], dict]:
    lines = iter(fh)
    try:
        header = json.loads(next(lines))
    except StopIteration:
        raise MetricsError("empty observation file") from None
    if header.get("format") != OBS_FORMAT:
        raise MetricsError("not an observation file")
    lanes = tuple(header["lanes"])
    out = []
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(
            StepObservation(
                clock=rec["t"],
                vehicles=tuple(VehicleRecord(*v) for v in rec["v"]),
                lane_ids=lanes,
                lane_counts=tuple(rec["n"]),
                queued_counts=tuple(rec["q"]),
                arrivals=tuple(ArrivalNote(*a) for a in rec["a"]),
            )
        )
    return out, header.get("meta", {})
