"""Discrete-time simulation loop for both dialects.

Dialect A (CityFlow-like) computes car-following proposals and lane-change
plans for every vehicle from an unchanged snapshot of the previous step; the
work can be fanned out over lanes to worker threads and is merged in a fixed
order, so results never depend on ``worker_count``.  Lane changes insert a
shadow copy of the vehicle on the target lane for the duration of the change.

Dialect B (SUMO-like) updates lanes sequentially, front to back, so followers
see their leader's new state; lane changes are planned afterwards on the
updated state, signalled to the target-lane lag vehicle, and carried out
without a shadow.

Both dialects share the junction protocol: the first vehicle of a lane asks
for a crossing grant into its next lane once it is within braking range of
the stop line.  Grants are issued in priority order (seeded draws in A,
distance then id in B) and only when every already-granted vehicle from
another approach is ahead of the requester by a followable gap.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import behavior as bh
from .behavior import FollowerContext, Kinematics, LaneChangePlan, Neighbor, TargetLane
from .demand import Flow, NoRouteError, shortest_route
from .metrics import QUEUE_SPEED, StepObservation, observe_step
from .network import RoadNetwork, validate_network

__all__ = [
    "EngineConfig",
    "Vehicle",
    "ArrivalRecord",
    "WorldState",
    "RunSummary",
    "EngineError",
    "SimulationInvariantError",
    "create_world",
    "inject_vehicles",
    "advance_signals",
    "commit_lane_change",
    "step",
    "run",
]

_EPS = 1e-9


class EngineError(RuntimeError):
    pass


class SimulationInvariantError(EngineError):
    """An internal invariant broke; the run cannot continue."""


@dataclass(frozen=True)
class EngineConfig:
    dialect: str = "A"
    dt: float = 1.0
    horizon: float = 3600.0
    seed: int = 0
    worker_count: int = 1
    check_invariants: bool = True
    request_buffer: float = 10.0  # m added to the braking distance for grant requests

    def __post_init__(self):
        if self.dialect not in bh.DIALECTS:
            raise ValueError(f"dialect must be one of {bh.DIALECTS}")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.horizon < self.dt:
            raise ValueError("horizon must be >= dt")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")

    @property
    def n_steps(self) -> int:
        return math.ceil(self.horizon / self.dt - 1e-9)


class _Lane:
    __slots__ = (
        "idx", "id", "road", "k", "length", "speed_limit", "vehicles",
        "next_lane", "group", "node", "left", "right",
    )

    def __init__(self, idx, lane_id, road, k, length, speed_limit):
        self.idx = idx
        self.id = lane_id
        self.road = road  # _Road
        self.k = k
        self.length = length
        self.speed_limit = speed_limit
        self.vehicles: list[Vehicle] = []  # front (largest position) first
        self.next_lane: dict[int, int] = {}  # next road idx -> lane idx
        self.group: dict[int, int] = {}  # next lane idx -> signal group
        self.node: int | None = None  # signalized node at the lane end
        self.left: int | None = None
        self.right: int | None = None


class _Road:
    __slots__ = ("idx", "id", "lanes", "serving")

    def __init__(self, idx, road_id):
        self.idx = idx
        self.id = road_id
        self.lanes: list[int] = []
        self.serving: dict[int, tuple[int, ...]] = {}  # next road idx -> lane ks


class Vehicle:
    """Mutable per-vehicle state; ``is_shadow`` marks a lane-change shadow."""

    __slots__ = (
        "vid", "order", "lane", "pos", "speed", "accel", "route", "ri", "depart",
        "profile", "length", "travel", "waiting", "lc_target", "lc_reason",
        "lc_cooldown_until", "grant", "shadow", "is_shadow", "real", "desired",
        "a_max", "b", "b_e", "slot", "moved",
    )

    def __init__(self, vid: str, order: int, profile, route: tuple[int, ...]):
        self.vid = vid
        self.order = order
        self.profile = profile
        self.route = route
        self.ri = 0
        self.lane = -1
        self.pos = 0.0
        self.speed = 0.0
        self.accel = 0.0
        self.depart = 0.0
        self.length = profile.vehicle_length
        self.travel = 0.0
        self.waiting = 0.0
        self.lc_target: int | None = None
        self.lc_reason = ""
        self.lc_cooldown_until = -math.inf
        self.grant: int | None = None
        self.shadow: Vehicle | None = None
        self.is_shadow = False
        self.real: Vehicle | None = None
        aggr = profile.aggressiveness
        self.a_max = aggr.max_accel
        self.b = abs(aggr.max_decel)
        self.b_e = abs(aggr.max_emergency_decel)
        self.desired = math.inf
        self.slot = 0
        self.moved = -1  # index of the last step in which the vehicle was advanced

    def __repr__(self) -> str:
        tag = "shadow" if self.is_shadow else "veh"
        return f"<{tag} {self.vid} lane={self.lane} pos={self.pos:.3f} v={self.speed:.3f}>"


def _make_shadow(veh: Vehicle) -> Vehicle:
    s = Vehicle.__new__(Vehicle)
    for name in Vehicle.__slots__:
        setattr(s, name, getattr(veh, name))
    s.vid = veh.vid + "#shadow"
    s.is_shadow = True
    s.real = veh
    s.shadow = None
    s.grant = None
    s.lc_target = None
    return s


@dataclass(frozen=True)
class ArrivalRecord:
    vehicle_id: str
    depart: float
    arrive: float
    travel_time: float
    waiting_time: float


@dataclass
class RunSummary:
    dialect: str
    seed: int
    steps: int
    injected: int
    arrived: int
    active: int
    pending: int
    mean_travel_time: float
    lane_changes: int
    aborted_lane_changes: int
    stopline_clamps: int
    reroutes: int = 0
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = dict(self.__dict__)
        if not include_timing:
            d.pop("wall_clock")
        return d


class WorldState:
    """Complete mutable simulation state owned by one coordinator."""

    def __init__(self, net: RoadNetwork, flows: Sequence[Flow], config: EngineConfig):
        self.net = net
        self.config = config
        self.dialect = config.dialect
        self.dt = config.dt
        self.k = 0
        self.rng = np.random.Generator(np.random.PCG64(config.seed))

        self.roads: list[_Road] = []
        self.lanes: list[_Lane] = []
        road_idx: dict[str, int] = {}
        lane_idx: dict[str, int] = {}
        for r in net.roads:
            rr = _Road(len(self.roads), r.id)
            road_idx[r.id] = rr.idx
            self.roads.append(rr)
            for k, lid in enumerate(r.lane_ids):
                lane = _Lane(len(self.lanes), lid, rr, k, r.length, r.speed_limit)
                lane_idx[lid] = lane.idx
                rr.lanes.append(lane.idx)
                self.lanes.append(lane)
        for rr in self.roads:
            for pos, li in enumerate(rr.lanes):
                lane = self.lanes[li]
                lane.right = rr.lanes[pos - 1] if pos > 0 else None
                lane.left = rr.lanes[pos + 1] if pos + 1 < len(rr.lanes) else None
        self.road_idx = road_idx
        self.lane_idx = lane_idx

        self.node_ids = sorted(net.signal_programs)
        node_idx = {n: i for i, n in enumerate(self.node_ids)}
        self.programs = [net.signal_programs[n] for n in self.node_ids]
        serving: dict[tuple[int, int], set[int]] = {}
        for c in net.connections:
            a, b = self.lanes[lane_idx[c.from_lane]], self.lanes[lane_idx[c.to_lane]]
            nxt_road = b.road.idx
            if nxt_road not in a.next_lane or b.k < self.lanes[a.next_lane[nxt_road]].k:
                a.next_lane[nxt_road] = b.idx
            a.group[b.idx] = c.signal_group
            if c.intersection in node_idx:
                a.node = node_idx[c.intersection]
            serving.setdefault((a.road.idx, nxt_road), set()).add(a.k)
        for (ri, nxt), ks in serving.items():
            self.roads[ri].serving[nxt] = tuple(sorted(ks))
        self.phase = [0] * len(self.programs)
        self.permitted: list[frozenset[int]] = [frozenset()] * len(self.programs)
        self._update_phases()

        ordered = sorted(flows, key=lambda f: (f.depart, f.vehicle_id))
        rank = {vid: i for i, vid in enumerate(sorted(f.vehicle_id for f in flows))}
        if len(rank) != len(flows):
            raise EngineError("vehicle ids must be unique")
        self.flows = ordered
        self.flow_order = rank
        self.next_flow = 0
        self.deferred: list[tuple[float, float, Flow]] = []  # (depart, tiebreak, flow)
        self.injected = 0
        self.active: dict[str, Vehicle] = {}
        self.arrived: list[ArrivalRecord] = []
        self.grants: dict[int, list[Vehicle]] = {}
        self.pending_changes: list[Vehicle] = []
        self.lane_changes = 0
        self.aborted_lane_changes = 0
        self.stopline_clamps = 0
        self.reroutes = 0
        self._route_cache: dict[tuple[int, int], tuple[int, ...] | None] = {}
        self.step_arrivals: list[ArrivalRecord] = []
        self.lane_id_tuple = tuple(lane.id for lane in self.lanes)
        self._pool: ThreadPoolExecutor | None = None

    # -- small helpers -------------------------------------------------

    @property
    def clock(self) -> float:
        return self.k * self.dt

    @property
    def pending(self) -> int:
        return len(self.flows) - self.next_flow + len(self.deferred)

    def lane_ids(self) -> list[str]:
        return [lane.id for lane in self.lanes]

    def _update_phases(self) -> None:
        for i, prog in enumerate(self.programs):
            self.phase[i] = prog.phase_index(self.clock)
            self.permitted[i] = frozenset(prog.phases[self.phase[i]].groups)

    def is_green(self, lane: _Lane, nxt: int) -> bool:
        if lane.node is None:
            return True
        return lane.group[nxt] in self.permitted[lane.node]

    def next_lane_of(self, veh: Vehicle) -> int | None:
        if veh.ri + 1 >= len(veh.route):
            return None
        return self.lanes[veh.lane].next_lane.get(veh.route[veh.ri + 1])

    def serves_route(self, lane: _Lane, veh: Vehicle) -> bool:
        if veh.ri + 1 >= len(veh.route):
            return True
        return veh.route[veh.ri + 1] in lane.next_lane

    def distance_to_serving(self, lane: _Lane, veh: Vehicle) -> int:
        if veh.ri + 1 >= len(veh.route):
            return 0
        ks = lane.road.serving.get(veh.route[veh.ri + 1], ())
        if not ks:
            return 1 << 20
        return min(abs(lane.k - k) for k in ks)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def pool(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.config.worker_count)
        return self._pool


def create_world(net: RoadNetwork, flows: Sequence[Flow], config: EngineConfig) -> WorldState:
    """Fresh world at clock 0 with every flow departing at 0 already injected."""
    world = WorldState(net, flows, config)
    inject_vehicles(world)
    return world


# ---------------------------------------------------------------------------
# signals and injection


def advance_signals(world: WorldState, dt: float | None = None) -> WorldState:
    """Advance the clock by one step and recompute every active phase."""
    if dt is not None and abs(dt - world.dt) > 1e-12:
        raise ValueError("advance_signals must use the world's step length")
    world.k += 1
    world._update_phases()
    return world


def _desired(profile, lane: _Lane) -> float:
    return lane.speed_limit * profile.desired_speed_factor


def inject_vehicles(world: WorldState, flows: Iterable[Flow] | None = None) -> WorldState:
    """Insert every due flow whose entry lane has room; the rest wait.

    ``flows`` optionally appends extra flows to the world's demand first.
    Ties between flows due at the same time go by a seeded priority draw in
    dialect A and by vehicle id in dialect B.  A blocked entry road blocks the
    flows queued behind it for this step.
    """
    if flows is not None:
        extra = list(flows)
        if extra:
            known = set(world.flow_order)
            for f in extra:
                if f.vehicle_id in known:
                    raise EngineError(f"duplicate vehicle id {f.vehicle_id!r}")
            remaining = world.flows[world.next_flow:] + extra
            world.flows = world.flows[: world.next_flow] + sorted(
                remaining, key=lambda f: (f.depart, f.vehicle_id)
            )
            ids = sorted(list(world.flow_order) + [f.vehicle_id for f in extra])
            world.flow_order = {vid: i for i, vid in enumerate(ids)}
            for v in world.active.values():
                v.order = world.flow_order[v.vid]

    clock = world.clock + 1e-9
    newly = []
    while world.next_flow < len(world.flows) and world.flows[world.next_flow].depart <= clock:
        newly.append(world.flows[world.next_flow])
        world.next_flow += 1
    if newly:
        if world.dialect == "A":
            keys = world.rng.random(len(newly))
        else:
            keys = [float(world.flow_order[f.vehicle_id]) for f in newly]
        world.deferred.extend((f.depart, float(key), f) for f, key in zip(newly, keys))
        world.deferred.sort(key=lambda item: (item[0], item[1]))

    still: list[tuple[float, float, Flow]] = []
    blocked: set[int] = set()
    for item in world.deferred:
        flow = item[2]
        road = world.road_idx[flow.route[0]]
        if road in blocked or not _try_insert(world, flow, road):
            blocked.add(road)
            still.append(item)
    world.deferred = still
    return world


def _entry_free(lane: _Lane) -> float:
    if not lane.vehicles:
        return math.inf
    last = lane.vehicles[-1]
    return last.pos - last.length


def _try_insert(world: WorldState, flow: Flow, road_i: int) -> bool:
    rr = world.roads[road_i]
    route = tuple(world.road_idx[r] for r in flow.route)
    if len(route) > 1:
        ks = rr.serving.get(route[1], ())
        if not ks:
            raise EngineError(f"flow {flow.vehicle_id!r}: route is not connected")
        candidates = [rr.lanes[k] for k in ks]
    else:
        candidates = list(rr.lanes)
    best = max(candidates, key=lambda li: (_entry_free(world.lanes[li]), -li))
    lane = world.lanes[best]
    free = _entry_free(lane)
    prof = flow.profile
    if free < prof.aggressiveness.min_gap + prof.vehicle_length:
        return False
    veh = Vehicle(flow.vehicle_id, world.flow_order[flow.vehicle_id], prof, route)
    veh.lane = lane.idx
    veh.desired = _desired(prof, lane)
    speed = min(lane.speed_limit, veh.desired)
    if lane.vehicles:
        last = lane.vehicles[-1]
        ctx = FollowerContext(speed, last.speed, free, veh.desired, world.dt, prof)
        speed = min(speed, bh.krauss_safe_speed(ctx, prof.aggressiveness.max_emergency_decel))
    veh.speed = speed
    veh.depart = world.clock
    lane.vehicles.append(veh)
    world.active[veh.vid] = veh
    world.injected += 1
    return True


# ---------------------------------------------------------------------------
# junction grants


def _dist_to_end(world: WorldState, veh: Vehicle) -> float:
    return world.lanes[veh.lane].length - veh.pos


def _can_stop(veh: Vehicle, d: float, decel: float) -> bool:
    return veh.speed * veh.speed / (2.0 * decel) <= d + _EPS


def _grant_candidate(world: WorldState, lane: _Lane) -> tuple[Vehicle, int] | None:
    """First vehicle on ``lane`` without a grant, if it may ask for one now.

    Everything ahead of it must already hold a grant, its next connection
    must be green and it must be within braking range of the stop line.
    """
    for veh in lane.vehicles:
        if veh.is_shadow:
            return None
        if veh.grant is not None:
            continue
        if veh.lc_target is not None:
            return None
        nxt = world.next_lane_of(veh)
        if nxt is None or not world.is_green(lane, nxt):
            return None
        d = lane.length - veh.pos
        reach = veh.speed * world.dt + veh.speed * veh.speed / (2.0 * veh.b)
        if d <= reach + world.config.request_buffer:
            return veh, nxt
        return None
    return None


def _route_from(world: WorldState, start: int, dest: int) -> tuple[int, ...] | None:
    key = (start, dest)
    if key not in world._route_cache:
        try:
            ids = shortest_route(world.net, world.roads[start].id, world.roads[dest].id)
            world._route_cache[key] = tuple(world.road_idx[r] for r in ids)
        except NoRouteError:
            world._route_cache[key] = None
    return world._route_cache[key]


def _reroute_stuck(world: WorldState) -> None:
    """A front vehicle halted at the stop line of a lane that cannot reach its
    next road continues on the fastest route through a road its lane does reach.

    When none of those roads leads to the destination the vehicle ends its
    trip on the first of them.
    """
    for lane in world.lanes:
        if not lane.vehicles or not lane.next_lane:
            continue
        veh = lane.vehicles[0]
        if veh.is_shadow or veh.ri + 1 >= len(veh.route) or veh.lc_target is not None:
            continue
        if veh.route[veh.ri + 1] in lane.next_lane:
            continue
        if veh.speed >= QUEUE_SPEED or lane.length - veh.pos > 1.0:
            continue
        dest = veh.route[-1]
        best = None
        for road in sorted(lane.next_lane):
            tail = _route_from(world, road, dest)
            if tail is None:
                continue
            cost = sum(world.net.roads[r].length / world.net.roads[r].speed_limit for r in tail)
            if best is None or cost < best[0] - 1e-12:
                best = (cost, tail)
        if best is None:
            # no onward path to the destination: leave the network here instead
            best = (0.0, (min(lane.next_lane),))
        veh.route = veh.route[: veh.ri + 1] + best[1]
        world.reroutes += 1


def _update_grants(world: WorldState) -> None:
    # revoke on red where the holder can still stop comfortably
    for nxt in sorted(world.grants):
        for veh in list(world.grants[nxt]):
            lane = world.lanes[veh.lane]
            if not world.is_green(lane, nxt) and _can_stop(veh, lane.length - veh.pos, veh.b):
                _revoke(world, veh)
    # issue in rounds: a grant on one vehicle lets the next one in its lane ask
    lanes = [lane for lane in world.lanes if lane.vehicles and lane.next_lane]
    while True:
        requests = []
        for lane in lanes:
            cand = _grant_candidate(world, lane)
            if cand is not None:
                requests.append(cand)
        if not requests:
            return
        if world.dialect == "A":
            keys = world.rng.random(len(requests))
            order = sorted(range(len(requests)), key=lambda i: (keys[i], requests[i][0].order))
        else:
            order = sorted(
                range(len(requests)),
                key=lambda i: (_dist_to_end(world, requests[i][0]), requests[i][0].order),
            )
        progressed = False
        for i in order:
            veh, nxt = requests[i]
            lane = world.lanes[veh.lane]
            committed = not _can_stop(veh, lane.length - veh.pos, veh.b_e)
            if committed or _grant_ok(world, veh, nxt):
                world.grants.setdefault(nxt, []).append(veh)
                veh.grant = nxt
                progressed = True
        if not progressed:
            return
        lanes = list({requests[i][0].lane: None for i in order if requests[i][0].grant is not None})
        lanes = [world.lanes[li] for li in sorted(lanes)]


def _grant_ok(world: WorldState, veh: Vehicle, nxt: int) -> bool:
    d = _dist_to_end(world, veh)
    ahead: Vehicle | None = None
    ahead_d = -math.inf
    for foe in world.grants.get(nxt, ()):
        if foe.lane == veh.lane:
            continue
        fd = _dist_to_end(world, foe)
        if fd >= d:
            return False
        if fd > ahead_d:
            ahead, ahead_d = foe, fd
    if ahead is None:
        return True
    gap = d - ahead_d - ahead.length
    if gap < 0:
        return False
    ctx = FollowerContext(veh.speed, ahead.speed, gap, veh.desired, world.dt, veh.profile)
    safe = bh.krauss_safe_speed(ctx, veh.profile.aggressiveness.max_emergency_decel)
    return safe >= max(0.0, veh.speed - veh.b * world.dt)


def _revoke(world: WorldState, veh: Vehicle) -> None:
    if veh.grant is not None:
        lst = world.grants.get(veh.grant, [])
        if veh in lst:
            lst.remove(veh)
        veh.grant = None


# ---------------------------------------------------------------------------
# car-following


def _lead_on_lane(lane: _Lane, pos: float, exclude: Vehicle | None = None) -> Vehicle | None:
    """Nearest occupant strictly ahead of ``pos`` on ``lane``."""
    best = None
    for v in lane.vehicles:
        if v is exclude:
            continue
        if v.pos > pos:
            best = v
        else:
            break
    return best


def _lag_on_lane(lane: _Lane, pos: float, exclude: Vehicle | None = None) -> Vehicle | None:
    """Nearest occupant at or behind ``pos`` on ``lane``."""
    for v in lane.vehicles:
        if v is exclude:
            continue
        if v.pos <= pos:
            return v
    return None


def _constraints(world: WorldState, veh: Vehicle, coop: dict[int, list[Vehicle]]):
    """Leaders, stop-line distance and lookahead for one vehicle.

    Each leader is ``(gap, speed, moved)`` where ``moved`` tells whether the
    leader has already been advanced in the current step.
    """
    lane = world.lanes[veh.lane]
    k = world.k
    leaders: list[tuple[float, float, bool]] = []
    stop_d: float | None = None
    lookahead = math.inf
    if veh.slot > 0:
        ahead = lane.vehicles[veh.slot - 1]
        leaders.append((ahead.pos - ahead.length - veh.pos, ahead.speed, ahead.moved == k))
    if veh.ri + 1 < len(veh.route):
        d = lane.length - veh.pos
        nxt = lane.next_lane.get(veh.route[veh.ri + 1])
        if nxt is None or veh.grant != nxt:
            stop_d = d
        else:
            nl = world.lanes[nxt]
            if nl.vehicles:
                last = nl.vehicles[-1]
                leaders.append((d + last.pos - last.length, last.speed, last.moved == k))
            best = None
            best_d = -math.inf
            for foe in world.grants.get(nxt, ()):
                if foe is veh or foe.lane == veh.lane:
                    continue
                fd = _dist_to_end(world, foe)
                if fd < d and fd > best_d:
                    best, best_d = foe, fd
            if best is not None:
                leaders.append((d - best_d - best.length, best.speed, best.moved == k))
            if world.dialect == "B" and veh.ri + 2 < len(veh.route):
                after = nl.next_lane.get(veh.route[veh.ri + 2])
                if after is None or not world.is_green(nl, after):
                    lookahead = d + nl.length
    if stop_d is not None:
        lookahead = stop_d
    if veh.lc_target is not None:
        lead = _lead_on_lane(world.lanes[veh.lc_target], veh.pos, exclude=veh.shadow)
        if lead is not None:
            leaders.append((lead.pos - lead.length - veh.pos, lead.speed, lead.moved == k))
    for changer in coop.get(id(veh), ()):
        leaders.append((changer.pos - changer.length - veh.pos, changer.speed, changer.moved == k))
    return leaders, stop_d, lookahead


def _decide(world: WorldState, veh: Vehicle, draw: float, coop) -> float:
    """Acceleration for this step (already clipped to the profile bounds)."""
    dialect = world.dialect
    lane = world.lanes[veh.lane]
    leaders, stop_d, lookahead = _constraints(world, veh, coop)
    ctx = FollowerContext(
        veh.speed, None, math.inf, veh.desired, world.dt, veh.profile, lookahead, lane.speed_limit
    )
    dt = world.dt
    if leaders:
        prop = min(bh.model_speed(ctx.with_leader(vl, g), dialect, draw) for g, vl, _ in leaders)
    else:
        prop = bh.model_speed(ctx, dialect, draw)
    if stop_d is not None:
        prop = min(prop, bh.stopping_speed(ctx, stop_d, bh.stopping_variant(dialect)))
        leaders.append((stop_d, 0.0, False))
    # a leader that already moved this step gets no further travel credit
    envelope = [
        (g - bh.leader_travel(vl, veh.b_e, dt) if moved else g, vl) for g, vl, moved in leaders
    ]
    for g, vl in envelope:
        prop = bh.safety_clip(prop, ctx.with_leader(vl, g))
    prop = min(prop, veh.desired, lane.speed_limit)
    if prop <= 0.0 and veh.speed > 0.0 and envelope:
        # stopping needs more room than a full-step deceleration to 0 leaves
        room = min(g + bh.leader_travel(vl, veh.b_e, dt) for g, vl in envelope)
        if veh.speed * dt / 2.0 > room:
            a = -veh.speed * veh.speed / (2.0 * room) if room > 0.0 else -veh.b_e
            return max(a, -veh.b_e)
    a = (prop - veh.speed) / dt
    return min(max(a, -veh.b_e), veh.a_max)


def _apply(world: WorldState, veh: Vehicle, accel: float) -> None:
    dt = world.dt
    k = bh.ballistic_update(Kinematics(veh.pos, veh.speed), accel, dt)
    veh.accel = (k.speed - veh.speed) / dt
    veh.pos = k.position
    veh.speed = k.speed
    veh.moved = world.k
    veh.travel = (world.k + 1) * dt - veh.depart
    if veh.speed < QUEUE_SPEED:
        veh.waiting += dt


def _assign_slots(world: WorldState) -> None:
    for lane in world.lanes:
        for i, v in enumerate(lane.vehicles):
            v.slot = i


def _coop_map(world: WorldState) -> dict[int, list[Vehicle]]:
    """Dialect B: each pending changer is followed by its target-lane lag."""
    coop: dict[int, list[Vehicle]] = {}
    if world.dialect != "B":
        return coop
    for ch in world.pending_changes:
        lag = _lag_on_lane(world.lanes[ch.lc_target], ch.pos)
        if lag is not None and not lag.is_shadow and lag.pos < ch.pos:
            coop.setdefault(id(lag), []).append(ch)
    return coop


def _lane_chunks(world: WorldState, n: int) -> list[list[int]]:
    return [list(range(i, len(world.lanes), n)) for i in range(n)]


def _propose_for_lanes(world: WorldState, lanes: list[int], draws, coop, plan: bool):
    out = []
    for li in lanes:
        for veh in world.lanes[li].vehicles:
            if veh.is_shadow:
                continue
            a = _decide(world, veh, draws[veh.order], coop)
            p = _plan_for(world, veh) if plan else None
            out.append((veh.order, veh, a, p))
    return out


def _car_following_a(world: WorldState, draws) -> list[tuple[Vehicle, LaneChangePlan]]:
    """Snapshot phase of dialect A; returns lane-change plans for later merge."""
    coop: dict = {}
    w = world.config.worker_count
    if w > 1:
        chunks = _lane_chunks(world, w)
        futures = [world.pool().submit(_propose_for_lanes, world, c, draws, coop, True) for c in chunks]
        results = [item for f in futures for item in f.result()]
    else:
        results = _propose_for_lanes(world, list(range(len(world.lanes))), draws, coop, True)
    results.sort(key=lambda item: item[0])
    for _, veh, a, _p in results:
        _apply(world, veh, a)
    return [(veh, p) for _, veh, _a, p in results if p is not None]


def _car_following_b(world: WorldState, draws) -> None:
    coop = _coop_map(world)
    for lane in world.lanes:
        for veh in list(lane.vehicles):
            if veh.is_shadow:
                continue
            _apply(world, veh, _decide(world, veh, draws[veh.order], coop))


def _mirror_shadows(world: WorldState) -> None:
    for veh in world.pending_changes:
        s = veh.shadow
        if s is not None:
            s.pos, s.speed, s.accel = veh.pos, veh.speed, veh.accel


# ---------------------------------------------------------------------------
# lane transfers at lane ends


def _sort_lane(lane: _Lane) -> None:
    lane.vehicles.sort(key=lambda v: (-v.pos, v.order, v.is_shadow))


def _cancel_change(world: WorldState, veh: Vehicle) -> None:
    if veh.lc_target is None:
        return
    _remove_shadow(world, veh)
    veh.lc_target = None
    if veh in world.pending_changes:
        world.pending_changes.remove(veh)


def _remove_shadow(world: WorldState, veh: Vehicle) -> None:
    s = veh.shadow
    if s is not None:
        target = world.lanes[s.lane]
        if s in target.vehicles:
            target.vehicles.remove(s)
        veh.shadow = None


def _transfer(world: WorldState) -> None:
    touched: set[int] = set()
    arrive = (world.k + 1) * world.dt
    for lane in world.lanes:
        moving = []
        while lane.vehicles and lane.vehicles[0].pos > lane.length:
            v = lane.vehicles[0]
            if v.is_shadow:
                # the real vehicle's own transfer cancels the change
                break
            moving.append(lane.vehicles.pop(0))
        for v in moving:
            if v.ri + 1 >= len(v.route):
                _cancel_change(world, v)
                del world.active[v.vid]
                rec = ArrivalRecord(v.vid, v.depart, arrive, arrive - v.depart, v.waiting)
                world.arrived.append(rec)
                world.step_arrivals.append(rec)
                continue
            nxt = lane.next_lane.get(v.route[v.ri + 1])
            if nxt is None or v.grant != nxt:
                if v.pos > lane.length + 1e-6:
                    world.stopline_clamps += 1
                v.pos = lane.length
                lane.vehicles.insert(0, v)
                continue
            _cancel_change(world, v)
            _revoke(world, v)
            v.pos -= lane.length
            v.lane = nxt
            v.ri += 1
            nl = world.lanes[nxt]
            v.desired = _desired(v.profile, nl)
            nl.vehicles.append(v)
            touched.add(nxt)
    for li in touched:
        _sort_lane(world.lanes[li])
    # shadows of vehicles that left their lane are gone; drop stragglers past the end
    for lane in world.lanes:
        if lane.vehicles and lane.vehicles[0].is_shadow and lane.vehicles[0].pos > lane.length:
            s = lane.vehicles[0]
            if s.real is not None and s.real.shadow is s:
                _cancel_change(world, s.real)
            elif s in lane.vehicles:
                lane.vehicles.remove(s)


# ---------------------------------------------------------------------------
# lane changes


def _neighbor(v: Vehicle | None, gap: float) -> Neighbor | None:
    if v is None:
        return None
    return Neighbor(gap, v.speed, v.profile)


def _virtual_occupants(world: WorldState, target: int, exclude: Vehicle) -> list[Vehicle]:
    """Dialect B: pending changers heading into ``target`` count as occupants."""
    if world.dialect != "B":
        return []
    return [c for c in world.pending_changes if c.lc_target == target and c is not exclude]


def _target_view(world: WorldState, veh: Vehicle, li: int) -> TargetLane:
    lane = world.lanes[li]
    occupants = [v for v in lane.vehicles if v is not veh.shadow and v is not veh]
    occupants += _virtual_occupants(world, li, veh)
    # (position on the target lane, vehicle); granted vehicles about to enter
    # from upstream sit at negative positions
    placed = [(v.pos, v) for v in occupants]
    placed += [(y.pos - world.lanes[y.lane].length, y) for y in world.grants.get(li, ()) if y is not veh]
    lead = lag = None
    lead_pos = lag_pos = 0.0
    for pos, v in placed:
        if pos > veh.pos:
            if lead is None or pos < lead_pos:
                lead, lead_pos = v, pos
        elif lag is None or pos > lag_pos:
            lag, lag_pos = v, pos
    return TargetLane(
        lane_id=lane.id,
        lane_index=lane.k,
        serves_route=world.serves_route(lane, veh),
        distance_to_serving=world.distance_to_serving(lane, veh),
        lead=_neighbor(lead, lead_pos - lead.length - veh.pos) if lead else None,
        lag=_neighbor(lag, veh.pos - veh.length - lag_pos) if lag else None,
    )


def _view(world: WorldState, veh: Vehicle) -> bh.LaneChangeView:
    lane = world.lanes[veh.lane]
    ahead = _lead_on_lane(lane, veh.pos, exclude=veh)
    cands = [_target_view(world, veh, li) for li in (lane.left, lane.right) if li is not None]
    return bh.LaneChangeView(
        vehicle_id=veh.vid,
        lane_id=lane.id,
        lane_index=lane.k,
        own_speed=veh.speed,
        desired_speed=veh.desired,
        dt=world.dt,
        profile=veh.profile,
        serves_route=world.serves_route(lane, veh),
        distance_to_serving=world.distance_to_serving(lane, veh),
        current_lead=_neighbor(ahead, ahead.pos - ahead.length - veh.pos) if ahead else None,
        candidates=cands,
    )


def _may_change(world: WorldState, veh: Vehicle) -> bool:
    lane = world.lanes[veh.lane]
    return (
        veh.lc_target is None
        and veh.grant is None
        and world.clock >= veh.lc_cooldown_until - _EPS
        and (lane.left is not None or lane.right is not None)
    )


def _plan_for(world: WorldState, veh: Vehicle) -> LaneChangePlan | None:
    if not _may_change(world, veh):
        return None
    return bh.plan_lane_change(_view(world, veh), world.dialect)


def _register(world: WorldState, veh: Vehicle, plan: LaneChangePlan) -> bool:
    """Recheck a fresh plan against the current state and make it pending."""
    if not _may_change(world, veh) or world.lanes[veh.lane].id != plan.from_lane:
        return False
    target = world.lane_idx[plan.to_lane]
    if not bh.gaps_acceptable(_view(world, veh), _target_view(world, veh, target)):
        return False
    veh.lc_target = target
    veh.lc_reason = plan.reason
    world.pending_changes.append(veh)
    if world.dialect == "A":
        s = _make_shadow(veh)
        s.lane = target
        veh.shadow = s
        tl = world.lanes[target]
        tl.vehicles.append(s)
        _sort_lane(tl)
    return True


def commit_lane_change(world: WorldState, veh: Vehicle) -> bool:
    """Complete ``veh``'s pending change if the target gaps still hold.

    Returns ``False`` (and leaves the vehicle on its lane) when the change
    had to be aborted.  Either way the shadow, if any, is removed.
    """
    target = veh.lc_target
    if target is None:
        return False
    ok = bh.gaps_acceptable(_view(world, veh), _target_view(world, veh, target))
    _remove_shadow(world, veh)
    veh.lc_target = None
    if veh in world.pending_changes:
        world.pending_changes.remove(veh)
    veh.lc_cooldown_until = world.clock + world.dt + veh.profile.params.lc_cooldown
    if not ok:
        world.aborted_lane_changes += 1
        return False
    src = world.lanes[veh.lane]
    src.vehicles.remove(veh)
    tl = world.lanes[target]
    veh.lane = target
    veh.desired = _desired(veh.profile, tl)
    tl.vehicles.append(veh)
    _sort_lane(tl)
    world.lane_changes += 1
    return True


def _commit_all(world: WorldState) -> None:
    for veh in sorted(world.pending_changes, key=lambda v: v.order):
        commit_lane_change(world, veh)


# ---------------------------------------------------------------------------
# step / run


def _check(world: WorldState) -> None:
    for lane in world.lanes:
        prev = None
        for v in lane.vehicles:
            if not (-_EPS <= v.pos <= lane.length + _EPS):
                raise SimulationInvariantError(
                    f"t={world.clock}: {v!r} outside lane {lane.id} (length {lane.length})"
                )
            if prev is not None:
                gap = prev.pos - prev.length - v.pos
                if gap < -_EPS:
                    raise SimulationInvariantError(
                        f"t={world.clock}: collision on {lane.id}: {v!r} behind {prev!r}, gap {gap:.6f}"
                    )
            prev = v
    for v in world.active.values():
        if v.speed < 0 or v.speed > v.desired + _EPS:
            raise SimulationInvariantError(f"t={world.clock}: speed bound broken by {v!r}")
        if v.waiting > v.travel + _EPS:
            raise SimulationInvariantError(f"t={world.clock}: waiting > travel for {v!r}")
    if world.injected != len(world.active) + len(world.arrived):
        raise SimulationInvariantError(f"t={world.clock}: vehicle conservation broken")
    if world.injected + world.pending != len(world.flows):
        raise SimulationInvariantError(f"t={world.clock}: flow conservation broken")


def step(world: WorldState, config: EngineConfig | None = None) -> StepObservation:
    """Advance ``world`` by one step in place and return the observation."""
    config = config or world.config
    world.step_arrivals = []
    _reroute_stuck(world)
    _update_grants(world)
    _assign_slots(world)
    n = len(world.flow_order)
    draws = np.ones(n)
    movers = sorted(world.active.values(), key=lambda v: v.order)
    if movers:
        u = world.rng.random(len(movers))
        for v, x in zip(movers, u):
            draws[v.order] = x
    draws = draws.tolist()

    if world.dialect == "A":
        plans = _car_following_a(world, draws)
        _mirror_shadows(world)
        _transfer(world)
        _commit_all(world)
        if plans:
            keys = world.rng.random(len(plans))
            order = sorted(range(len(plans)), key=lambda i: (keys[i], plans[i][0].order))
            for i in order:
                veh, plan = plans[i]
                if veh.vid in world.active:
                    _register(world, veh, plan)
    else:
        _car_following_b(world, draws)
        _transfer(world)
        _commit_all(world)
        for lane in world.lanes:
            for veh in list(lane.vehicles):
                if veh.is_shadow:
                    continue
                plan = _plan_for(world, veh)
                if plan is not None:
                    _register(world, veh, plan)

    advance_signals(world)
    inject_vehicles(world)
    if config.check_invariants:
        _check(world)
    return observe_step(world)


def summarize(world: WorldState, wall: float = 0.0) -> RunSummary:
    tts = [a.travel_time for a in world.arrived]
    return RunSummary(
        dialect=world.dialect,
        seed=world.config.seed,
        steps=world.k,
        injected=world.injected,
        arrived=len(world.arrived),
        active=len(world.active),
        pending=world.pending,
        mean_travel_time=float(np.mean(tts)) if tts else 0.0,
        lane_changes=world.lane_changes,
        aborted_lane_changes=world.aborted_lane_changes,
        stopline_clamps=world.stopline_clamps,
        reroutes=world.reroutes,
        wall_clock=wall,
    )


def run(
    net: RoadNetwork, flows: Sequence[Flow], config: EngineConfig
) -> tuple[list[StepObservation], RunSummary]:
    """Simulate ``ceil(horizon / dt)`` steps and collect one observation per step."""
    report = validate_network(net)
    if report:
        raise EngineError(f"invalid network: {report.violations[0]}")
    t0 = time.perf_counter()
    world = create_world(net, flows, config)
    try:
        observations = [step(world, config) for _ in range(config.n_steps)]
    finally:
        world.close()
    return observations, summarize(world, time.perf_counter() - t0)
