"""Driver profiles, single-vehicle flows and demand construction."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .behavior import CAR_FOLLOWING_MODELS, ModelParams
from .network import RoadNetwork

__all__ = [
    "AggressivenessProfile",
    "DriverProfile",
    "Flow",
    "AGGRESSIVENESS_TYPES",
    "GAP_TOLERANCE_LEVELS",
    "DemandError",
    "UnknownProfileError",
    "NoRouteError",
    "FlowSchemaError",
    "NegativeRateError",
    "make_profile",
    "shortest_route",
    "route_is_connected",
    "build_demand",
    "convert_flows",
    "flows_to_document",
    "dump_flows",
    "flows_from_document",
]


class DemandError(ValueError):
    pass


class UnknownProfileError(DemandError):
    pass


class NoRouteError(DemandError):
    pass


class FlowSchemaError(DemandError):
    pass


class NegativeRateError(DemandError):
    pass


@dataclass(frozen=True)
class AggressivenessProfile:
    max_accel: float  # m/s^2
    max_decel: float  # m/s^2, negative
    max_emergency_decel: float  # m/s^2, negative
    min_gap: float  # m
    min_headway: float  # s

    def __post_init__(self):
        if not self.max_accel > 0:
            raise ValueError("max_accel must be > 0")
        if not self.max_emergency_decel <= self.max_decel < 0:
            raise ValueError("need max_emergency_decel <= max_decel < 0")
        if not self.min_gap > 0 or not self.min_headway > 0:
            raise ValueError("min_gap and min_headway must be > 0")


# Capela Dias et al. taxonomy; emergency deceleration fixed at -9.0 for all types
AGGRESSIVENESS_TYPES: dict[str, AggressivenessProfile] = {
    "aggressive_young": AggressivenessProfile(3.1, -5.5, -9.0, 1.2, 1.0),
    "courteous_young": AggressivenessProfile(2.5, -4.5, -9.0, 2.5, 1.0),
    "aggressive_middle_aged": AggressivenessProfile(2.9, -5.0, -9.0, 2.0, 1.3),
    "courteous_middle_aged": AggressivenessProfile(2.4, -4.1, -9.0, 2.5, 1.5),
    "aggressive_old": AggressivenessProfile(2.6, -4.5, -9.0, 2.0, 1.7),
    "courteous_old": AggressivenessProfile(2.3, -3.8, -9.0, 2.5, 1.9),
}

GAP_TOLERANCE_LEVELS = (0.5, 0.82, 1.0, 1.18, 1.5)


def make_profile(aggressiveness_type: str) -> AggressivenessProfile:
    try:
        return AGGRESSIVENESS_TYPES[aggressiveness_type]
    except KeyError:
        raise UnknownProfileError(
            f"unknown aggressiveness type {aggressiveness_type!r}; "
            f"expected one of {sorted(AGGRESSIVENESS_TYPES)}"
        ) from None


@dataclass(frozen=True)
class DriverProfile:
    aggressiveness: AggressivenessProfile = field(
        default_factory=lambda: AGGRESSIVENESS_TYPES["aggressive_middle_aged"]
    )
    car_following: str = "krauss_default"
    gap_tolerance: float = 1.0
    vehicle_length: float = 5.0
    desired_speed_factor: float = 1.0
    params: ModelParams = field(default_factory=ModelParams)
    label: str = "aggressive_middle_aged"

    def __post_init__(self):
        if self.car_following not in CAR_FOLLOWING_MODELS:
            raise ValueError(f"unknown car-following model {self.car_following!r}")
        if not self.gap_tolerance > 0:
            raise ValueError("gap_tolerance must be > 0")
        if not self.vehicle_length > 0:
            raise ValueError("vehicle_length must be > 0")

    @classmethod
    def from_label(cls, label: str, **kwargs: Any) -> "DriverProfile":
        return cls(aggressiveness=make_profile(label), label=label, **kwargs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "aggressiveness": asdict(self.aggressiveness),
            "car_following": self.car_following,
            "gap_tolerance": self.gap_tolerance,
            "vehicle_length": self.vehicle_length,
            "desired_speed_factor": self.desired_speed_factor,
            "params": asdict(self.params),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DriverProfile":
        label = d.get("label", "aggressive_middle_aged")
        aggr = d.get("aggressiveness")
        if isinstance(aggr, str):
            label, aggr = aggr, make_profile(aggr)
        elif aggr is None:
            aggr = make_profile(label)
        else:
            aggr = AggressivenessProfile(**aggr)
        known = {f.name for f in fields(ModelParams)}
        extra = set(d.get("params", {})) - known
        if extra:
            raise FlowSchemaError(f"unknown model parameters {sorted(extra)}")
        return cls(
            aggressiveness=aggr,
            car_following=d.get("car_following", "krauss_default"),
            gap_tolerance=float(d.get("gap_tolerance", 1.0)),
            vehicle_length=float(d.get("vehicle_length", 5.0)),
            desired_speed_factor=float(d.get("desired_speed_factor", 1.0)),
            params=ModelParams(**d.get("params", {})),
            label=label,
        )


@dataclass(frozen=True)
class Flow:
    vehicle_id: str
    depart: float
    route: tuple[str, ...]
    profile: DriverProfile = field(default_factory=DriverProfile)

    def __post_init__(self):
        if not self.route:
            raise ValueError(f"flow {self.vehicle_id!r} has an empty route")
        if self.depart < 0:
            raise ValueError(f"flow {self.vehicle_id!r} departs before 0")


# ---------------------------------------------------------------------------
# routing


def route_is_connected(net: RoadNetwork, route: Sequence[str]) -> bool:
    if not route or any(r not in net.road_by_id for r in route):
        return False
    succ = net.successors
    return all(b in succ[a] for a, b in zip(route, route[1:]))


def shortest_route(net: RoadNetwork, origin: str, destination: str) -> tuple[str, ...]:
    """Fastest road sequence at the speed limit (Dijkstra, ties by road id)."""
    roads = net.road_by_id
    if origin not in roads or destination not in roads:
        raise NoRouteError(f"unknown road in {origin!r} -> {destination!r}")
    cost0 = roads[origin].length / roads[origin].speed_limit
    heap: list[tuple[float, str]] = [(cost0, origin)]
    best = {origin: cost0}
    prev: dict[str, str] = {}
    succ = net.successors
    while heap:
        cost, road = heapq.heappop(heap)
        if road == destination:
            path = [road]
            while path[-1] in prev:
                path.append(prev[path[-1]])
            return tuple(reversed(path))
        if cost > best[road]:
            continue
        for nxt in succ[road]:
            c = cost + roads[nxt].length / roads[nxt].speed_limit
            if c < best.get(nxt, math.inf):
                best[nxt] = c
                prev[nxt] = road
                heapq.heappush(heap, (c, nxt))
    raise NoRouteError(f"no route from {origin!r} to {destination!r}")


# ---------------------------------------------------------------------------
# demand patterns


def _od_pairs(net: RoadNetwork):
    sources = sorted(net.source_roads(), key=lambda r: r.id)
    sinks = sorted(net.sink_roads(), key=lambda r: r.id)
    return sources, sinks


def build_demand(
    net: RoadNetwork,
    pattern: str = "uniform",
    total_vehicles: int = 0,
    horizon: float = 3600.0,
    seed: int = 0,
    profile: DriverProfile | None = None,
    alternation_period: float = 600.0,
    emphasis: float = 0.8,
) -> list[Flow]:
    """Deterministic single-vehicle demand between boundary stubs.

    Departures are spaced evenly over ``[0, horizon)``.  ``"uniform"`` draws
    origin and destination stubs uniformly; ``"alternating_major_minor"``
    switches every ``alternation_period`` seconds between favouring origins on
    major and on minor roads (``emphasis`` is the favoured class's share).
    """
    if total_vehicles < 0:
        raise DemandError("total_vehicles must be >= 0")
    if not horizon > 0:
        raise DemandError("horizon must be > 0")
    if pattern not in ("uniform", "alternating_major_minor"):
        raise DemandError(f"unknown demand pattern {pattern!r}")
    if total_vehicles == 0:
        return []
    profile = profile or DriverProfile()
    sources, sinks = _od_pairs(net)
    if not sources or not sinks:
        raise NoRouteError("network has no boundary stubs")
    by_class: dict[str | None, list] = {}
    for s in sources:
        by_class.setdefault(s.road_class, []).append(s)
    if pattern == "alternating_major_minor" and not ({"major", "minor"} <= set(by_class)):
        raise DemandError("alternating pattern needs a network with major and minor roads")

    rng = np.random.default_rng(seed)
    routes: dict[tuple[str, str], tuple[str, ...]] = {}
    flows = []
    width = len(str(total_vehicles - 1))
    for i in range(total_vehicles):
        depart = i * horizon / total_vehicles
        if pattern == "uniform":
            pool = sources
        else:
            major_window = int(depart // alternation_period) % 2 == 0
            favoured = "major" if major_window else "minor"
            other = "minor" if major_window else "major"
            pool = by_class[favoured] if rng.random() < emphasis else by_class[other]
        origin = pool[int(rng.integers(len(pool)))]
        dests = [s for s in sinks if s.to_node != origin.from_node]
        dest = dests[int(rng.integers(len(dests)))]
        key = (origin.id, dest.id)
        if key not in routes:
            routes[key] = shortest_route(net, origin.id, dest.id)
        flows.append(Flow(f"veh{i:0{width}d}", depart, routes[key], profile))
    return flows


# ---------------------------------------------------------------------------
# canonical and dialect flow documents


def flows_to_document(flows: Sequence[Flow]) -> list[dict[str, Any]]:
    return [
        {"id": f.vehicle_id, "depart": f.depart, "route": list(f.route), "profile": f.profile.to_dict()}
        for f in flows
    ]


def dump_flows(flows: Sequence[Flow]) -> str:
    return json.dumps(flows_to_document(flows), indent=1) + "\n"


def flows_from_document(doc: Sequence[Mapping[str, Any]], profile: DriverProfile | None = None) -> list[Flow]:
    out = []
    for i, rec in enumerate(doc):
        try:
            prof = DriverProfile.from_dict(rec["profile"]) if "profile" in rec else (profile or DriverProfile())
            out.append(Flow(str(rec["id"]), float(rec["depart"]), tuple(rec["route"]), prof))
        except (KeyError, TypeError, ValueError) as exc:
            raise FlowSchemaError(f"flow record [{i}]: {exc}") from exc
    return _normalize(out)


def _normalize(flows: list[Flow]) -> list[Flow]:
    return sorted(flows, key=lambda f: (f.depart, f.vehicle_id))


def _expand(start: float, end: float, rate: float) -> list[float]:
    if rate < 0:
        raise NegativeRateError(f"negative flow rate {rate}")
    if rate == 0:
        return []
    times = []
    k = 0
    while True:
        t = start + k / rate
        if t >= end:
            return times
        times.append(t)
        k += 1


def _route_list(route: Any) -> tuple[str, ...]:
    if isinstance(route, str):
        return tuple(route.split())
    return tuple(route)


def _cityflow_profile(vehicle: Mapping[str, Any], default: DriverProfile) -> DriverProfile:
    if not vehicle:
        return default
    aggr = default.aggressiveness
    aggr = AggressivenessProfile(
        max_accel=float(vehicle.get("maxPosAcc", aggr.max_accel)),
        max_decel=-abs(float(vehicle.get("maxNegAcc", aggr.max_decel))),
        max_emergency_decel=-abs(float(vehicle.get("maxEmergencyNegAcc", aggr.max_emergency_decel))),
        min_gap=float(vehicle.get("minGap", aggr.min_gap)),
        min_headway=float(vehicle.get("headwayTime", aggr.min_headway)),
    )
    return replace(default, aggressiveness=aggr, vehicle_length=float(vehicle.get("length", default.vehicle_length)))


def convert_flows(document: Any, profile: DriverProfile | None = None, dialect: str | None = None) -> list[Flow]:
    """Expand a dialect flow document into single-vehicle deterministic flows.

    Accepted shapes (``dialect`` is inferred when not given):

    * ``"canonical"`` - list of ``{id, depart, route, profile?}`` records;
    * ``"cityflow"`` - list of ``{vehicle, route, interval, startTime, endTime}``;
      one vehicle every ``interval`` seconds in ``[startTime, endTime)``, or a
      single vehicle when ``startTime == endTime``;
    * ``"sumo"`` - ``{"vehicles": [{id, depart, route}], "flows": [{id, begin,
      end, route, rate | period | vehsPerHour}]}`` with rates in veh/s.
    """
    profile = profile or DriverProfile()
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise FlowSchemaError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if dialect is None:
        if isinstance(document, Mapping):
            dialect = "sumo"
        elif isinstance(document, list) and document and "interval" in document[0]:
            dialect = "cityflow"
        elif isinstance(document, list):
            dialect = "canonical"
        else:
            raise FlowSchemaError("unrecognised flow document")

    if dialect == "canonical":
        return flows_from_document(document, profile)

    out: list[Flow] = []
    if dialect == "cityflow":
        if not isinstance(document, list):
            raise FlowSchemaError("cityflow flow document must be a list")
        for i, rec in enumerate(document):
            try:
                start = float(rec.get("startTime", 0.0))
                end = float(rec.get("endTime", start))
                interval = float(rec["interval"])
                route = _route_list(rec["route"])
            except (KeyError, TypeError, ValueError) as exc:
                raise FlowSchemaError(f"cityflow flow [{i}]: {exc}") from exc
            if interval < 0:
                raise NegativeRateError(f"cityflow flow [{i}] has negative interval")
            prof = _cityflow_profile(rec.get("vehicle", {}), profile)
            if end <= start:
                times = [start]
            elif interval == 0:
                raise FlowSchemaError(f"cityflow flow [{i}] has zero interval over a non-empty window")
            else:
                times = _expand(start, end, 1.0 / interval)
            for k, t in enumerate(times):
                out.append(Flow(f"flow_{i}_{k}", t, route, prof))
        return _normalize(out)

    if dialect == "sumo":
        if not isinstance(document, Mapping):
            raise FlowSchemaError("sumo flow document must be an object")
        try:
            for v in document.get("vehicles", []):
                out.append(Flow(str(v["id"]), float(v["depart"]), _route_list(v["route"]), profile))
            for f in document.get("flows", []):
                if "rate" in f:
                    rate = float(f["rate"])
                elif "period" in f:
                    period = float(f["period"])
                    if period <= 0:
                        raise NegativeRateError(f"flow {f['id']!r} has non-positive period")
                    rate = 1.0 / period
                elif "vehsPerHour" in f:
                    rate = float(f["vehsPerHour"]) / 3600.0
                else:
                    raise FlowSchemaError(f"flow {f.get('id')!r} has no rate, period or vehsPerHour")
                for k, t in enumerate(_expand(float(f["begin"]), float(f["end"]), rate)):
                    out.append(Flow(f"{f['id']}.{k}", t, _route_list(f["route"]), profile))
        except (KeyError, TypeError) as exc:
            raise FlowSchemaError(f"sumo flow document: missing field {exc}") from exc
        return _normalize(out)

    raise FlowSchemaError(f"unknown flow dialect {dialect!r}")
