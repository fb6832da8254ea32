"""Road-network data model, synthetic generators and the canonical JSON format.

A network is a directed graph: intersections are nodes, roads are directed
edges carrying one or more lanes, and connections join an incoming lane to an
outgoing lane across an intersection.  Lane ``k`` of road ``r`` has the id
``"{r}_{k}"``; lane 0 is the rightmost lane.

Signalized intersections run a fixed-time program whose phases each permit a
set of signal groups.  Boundary nodes are unsignalized sources/sinks at the
far end of the perimeter stub roads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping

import jsonschema

__all__ = [
    "Intersection",
    "Road",
    "Connection",
    "Phase",
    "SignalProgram",
    "RoadNetwork",
    "Violation",
    "ValidationReport",
    "NetworkError",
    "InvalidDimensionError",
    "NetworkSchemaError",
    "ReferentialIntegrityError",
    "lane_id",
    "generate_grid",
    "generate_arterial",
    "validate_network",
    "network_to_document",
    "dump_network",
    "load_network",
]

STUB_LENGTH = 200.0
DEFAULT_SPEED_LIMIT = 13.89
DEFAULT_PHASE_DURATION = 30.0
NETWORK_FORMAT = "twinflow-network"
NETWORK_VERSION = 1

# compass headings of travel; right turn is +1, left turn is +3 (mod 4)
NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
_HEADING_NAMES = "NESW"
_OFFSETS = {NORTH: (-1, 0), EAST: (0, 1), SOUTH: (1, 0), WEST: (0, -1)}

# signal groups of the default program
NS_GROUP = 0
EW_GROUP = 1


class NetworkError(Exception):
    """Base class for network construction and loading errors."""


class InvalidDimensionError(NetworkError, ValueError):
    pass


class NetworkSchemaError(NetworkError, ValueError):
    """The document does not conform to the canonical network schema."""


class ReferentialIntegrityError(NetworkError, ValueError):
    """The document parsed, but references or invariants are broken."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        lines = "; ".join(str(v) for v in report.violations)
        super().__init__(f"network failed validation: {lines}")


def lane_id(road_id: str, index: int) -> str:
    return f"{road_id}_{index}"


@dataclass(frozen=True)
class Intersection:
    id: str
    x: float
    y: float
    kind: str = "signalized"  # or "boundary"

    @property
    def signalized(self) -> bool:
        return self.kind == "signalized"


@dataclass(frozen=True)
class Road:
    id: str
    from_node: str
    to_node: str
    length: float
    lanes: int
    speed_limit: float
    road_class: str | None = None

    @property
    def lane_ids(self) -> tuple[str, ...]:
        return tuple(lane_id(self.id, k) for k in range(self.lanes))


@dataclass(frozen=True)
class Connection:
    from_lane: str
    to_lane: str
    intersection: str
    signal_group: int


@dataclass(frozen=True)
class Phase:
    duration: float
    groups: tuple[int, ...]


@dataclass(frozen=True)
class SignalProgram:
    phases: tuple[Phase, ...]
    offset: float = 0.0

    @property
    def cycle(self) -> float:
        return sum(p.duration for p in self.phases)

    def phase_index(self, clock: float) -> int:
        """Index of the phase active at ``clock`` (seconds)."""
        t = (clock - self.offset) % self.cycle
        acc = 0.0
        for i, phase in enumerate(self.phases):
            acc += phase.duration
            if t < acc:
                return i
        return len(self.phases) - 1


@dataclass(frozen=True)
class RoadNetwork:
    intersections: tuple[Intersection, ...]
    roads: tuple[Road, ...]
    connections: tuple[Connection, ...]
    signal_programs: Mapping[str, SignalProgram] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RoadNetwork):
            return NotImplemented
        return (
            self.intersections == other.intersections
            and self.roads == other.roads
            and self.connections == other.connections
            and dict(self.signal_programs) == dict(other.signal_programs)
        )

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def intersection_by_id(self) -> dict[str, Intersection]:
        return {i.id: i for i in self.intersections}

    @cached_property
    def road_by_id(self) -> dict[str, Road]:
        return {r.id: r for r in self.roads}

    @cached_property
    def lane_index(self) -> dict[str, tuple[Road, int]]:
        """Map lane id -> (road, lane index within road)."""
        out: dict[str, tuple[Road, int]] = {}
        for road in self.roads:
            for k in range(road.lanes):
                out[lane_id(road.id, k)] = (road, k)
        return out

    @cached_property
    def successors(self) -> dict[str, tuple[str, ...]]:
        """Road id -> sorted ids of roads reachable through one connection."""
        succ: dict[str, set[str]] = {r.id: set() for r in self.roads}
        for c in self.connections:
            a = self.lane_index.get(c.from_lane)
            b = self.lane_index.get(c.to_lane)
            if a and b:
                succ[a[0].id].add(b[0].id)
        return {k: tuple(sorted(v)) for k, v in succ.items()}

    def source_roads(self) -> list[Road]:
        """Roads leaving a boundary node (vehicle entry points)."""
        by_id = self.intersection_by_id
        return [r for r in self.roads if not by_id[r.from_node].signalized]

    def sink_roads(self) -> list[Road]:
        """Roads entering a boundary node (vehicle exit points)."""
        by_id = self.intersection_by_id
        return [r for r in self.roads if not by_id[r.to_node].signalized]


@dataclass(frozen=True)
class Violation:
    code: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(self.violations)


# ---------------------------------------------------------------------------
# generators


def _default_program(duration: float = DEFAULT_PHASE_DURATION) -> SignalProgram:
    return SignalProgram(
        phases=(Phase(duration, (NS_GROUP,)), Phase(duration, (EW_GROUP,))),
        offset=0.0,
    )


def _heading_between(a: Intersection, b: Intersection) -> int:
    dx, dy = b.x - a.x, b.y - a.y
    if abs(dx) >= abs(dy):
        return EAST if dx > 0 else WEST
    return NORTH if dy > 0 else SOUTH


def _build_grid(
    rows: int,
    cols: int,
    lanes_for,
    block_length: float,
    speed_limit: float,
    class_for,
) -> RoadNetwork:
    """Shared construction for grid-shaped networks.

    ``lanes_for(heading)`` and ``class_for(heading)`` pick the lane count and
    road class from the travel heading, so arterial and uniform grids share the
    same topology code.
    """
    intersections: list[Intersection] = []
    node_at: dict[tuple[int, int], Intersection] = {}
    for r in range(rows):
        for c in range(cols):
            node = Intersection(f"i{r}_{c}", c * block_length, -r * block_length)
            intersections.append(node)
            node_at[(r, c)] = node

    roads: list[Road] = []

    def add_road(a: Intersection, b: Intersection, length: float) -> None:
        h = _heading_between(a, b)
        roads.append(
            Road(
                id=f"{a.id}__{b.id}",
                from_node=a.id,
                to_node=b.id,
                length=length,
                lanes=lanes_for(h),
                speed_limit=speed_limit,
                road_class=class_for(h),
            )
        )

    boundary: list[Intersection] = []
    for r in range(rows):
        for c in range(cols):
            node = node_at[(r, c)]
            for h in (NORTH, EAST, SOUTH, WEST):
                dr, dc = _OFFSETS[h]
                nb = node_at.get((r + dr, c + dc))
                if nb is not None:
                    add_road(node, nb, block_length)
                else:
                    bx = node.x + dc * STUB_LENGTH
                    by = node.y - dr * STUB_LENGTH
                    b = Intersection(f"b{r}_{c}_{_HEADING_NAMES[h]}", bx, by, "boundary")
                    boundary.append(b)
                    add_road(node, b, STUB_LENGTH)
                    add_road(b, node, STUB_LENGTH)

    net_nodes = tuple(intersections + boundary)
    by_id = {n.id: n for n in net_nodes}
    incoming: dict[str, list[Road]] = {}
    outgoing: dict[str, list[Road]] = {}
    for road in roads:
        incoming.setdefault(road.to_node, []).append(road)
        outgoing.setdefault(road.from_node, []).append(road)

    connections: list[Connection] = []
    for node in intersections:
        for rin in sorted(incoming.get(node.id, []), key=lambda r: r.id):
            h_in = _heading_between(by_id[rin.from_node], node)
            group = NS_GROUP if h_in in (NORTH, SOUTH) else EW_GROUP
            for rout in sorted(outgoing.get(node.id, []), key=lambda r: r.id):
                h_out = _heading_between(node, by_id[rout.to_node])
                turn = (h_out - h_in) % 4
                if turn == 0:
                    pairs = [(k, min(k, rout.lanes - 1)) for k in range(rin.lanes)]
                elif turn == 1:
                    pairs = [(0, 0)]
                elif turn == 3:
                    pairs = [(rin.lanes - 1, rout.lanes - 1)]
                else:
                    continue  # no U-turns
                for a, b in pairs:
                    connections.append(
                        Connection(lane_id(rin.id, a), lane_id(rout.id, b), node.id, group)
                    )

    programs = {node.id: _default_program() for node in intersections}
    return RoadNetwork(net_nodes, tuple(roads), tuple(connections), programs)


def generate_grid(
    rows: int,
    cols: int,
    lanes_per_direction: int = 3,
    block_length: float = 200.0,
    speed_limit: float = DEFAULT_SPEED_LIMIT,
) -> RoadNetwork:
    """Uniform ``rows x cols`` grid of signalized intersections.

    Neighbours are joined by one road per direction; every perimeter side of
    the grid gets a bidirectional 200 m stub to a boundary node.
    """
    if rows < 1 or cols < 1:
        raise InvalidDimensionError(f"grid needs rows, cols >= 1 (got {rows}x{cols})")
    if lanes_per_direction < 1:
        raise InvalidDimensionError("lanes_per_direction must be >= 1")
    if not block_length > 0:
        raise InvalidDimensionError("block_length must be > 0")
    if not speed_limit > 0:
        raise InvalidDimensionError("speed_limit must be > 0")
    return _build_grid(
        rows, cols, lambda h: lanes_per_direction, block_length, speed_limit, lambda h: None
    )


def generate_arterial(
    rows: int,
    cols: int,
    major_lanes: int = 2,
    minor_lanes: int = 1,
    block_length: float = 200.0,
    speed_limit: float = DEFAULT_SPEED_LIMIT,
) -> RoadNetwork:
    """Grid with east-west major roads and north-south minor roads."""
    if rows < 1 or cols < 1:
        raise InvalidDimensionError(f"arterial needs rows, cols >= 1 (got {rows}x{cols})")
    if minor_lanes < 1 or major_lanes <= minor_lanes:
        raise InvalidDimensionError(
            f"need major_lanes > minor_lanes >= 1 (got {major_lanes}, {minor_lanes})"
        )
    if not block_length > 0:
        raise InvalidDimensionError("block_length must be > 0")
    if not speed_limit > 0:
        raise InvalidDimensionError("speed_limit must be > 0")

    def is_major(h: int) -> bool:
        return h in (EAST, WEST)

    return _build_grid(
        rows,
        cols,
        lambda h: major_lanes if is_major(h) else minor_lanes,
        block_length,
        speed_limit,
        lambda h: "major" if is_major(h) else "minor",
    )


# ---------------------------------------------------------------------------
# validation


def validate_network(net: RoadNetwork) -> ValidationReport:
    """List every violated structural invariant of ``net``."""
    out: list[Violation] = []
    nodes: dict[str, Intersection] = {}
    for node in net.intersections:
        if node.id in nodes:
            out.append(Violation("duplicate-id", f"intersection {node.id!r} defined twice"))
        nodes[node.id] = node

    lanes: dict[str, Road] = {}
    road_ids: set[str] = set()
    for road in net.roads:
        if road.id in road_ids:
            out.append(Violation("duplicate-id", f"road {road.id!r} defined twice"))
        road_ids.add(road.id)
        for end in (road.from_node, road.to_node):
            if end not in nodes:
                out.append(
                    Violation("road-endpoint", f"road {road.id!r} references missing node {end!r}")
                )
        if road.lanes < 1:
            out.append(Violation("lane-count", f"road {road.id!r} has {road.lanes} lanes"))
        if not road.length > 0:
            out.append(
                Violation("lane-length", f"lanes of road {road.id!r} have length {road.length}")
            )
        if not road.speed_limit > 0:
            out.append(
                Violation(
                    "lane-speed", f"lanes of road {road.id!r} have speed limit {road.speed_limit}"
                )
            )
        for lid in road.lane_ids:
            if lid in lanes:
                out.append(Violation("duplicate-lane", f"lane id {lid!r} is not unique"))
            lanes[lid] = road

    used_groups: dict[str, set[int]] = {}
    for c in net.connections:
        src, dst = lanes.get(c.from_lane), lanes.get(c.to_lane)
        if src is None or dst is None:
            missing = c.from_lane if src is None else c.to_lane
            out.append(
                Violation("connection-lane", f"connection at {c.intersection!r} names missing lane {missing!r}")
            )
            continue
        if c.intersection not in nodes:
            out.append(
                Violation("connection-node", f"connection names missing intersection {c.intersection!r}")
            )
            continue
        if src.to_node != c.intersection or dst.from_node != c.intersection:
            out.append(
                Violation(
                    "connection-geometry",
                    f"connection {c.from_lane}->{c.to_lane} does not meet at {c.intersection!r}",
                )
            )
        used_groups.setdefault(c.intersection, set()).add(c.signal_group)

    for node_id, program in net.signal_programs.items():
        if node_id not in nodes:
            out.append(Violation("signal-node", f"signal program for missing node {node_id!r}"))
            continue
        if not program.phases:
            out.append(Violation("signal-empty", f"signal program at {node_id!r} has no phases"))
            continue
        for i, phase in enumerate(program.phases):
            if not phase.duration > 0:
                out.append(
                    Violation(
                        "signal-duration",
                        f"phase {i} at {node_id!r} has duration {phase.duration}",
                    )
                )
        served = set().union(*(set(p.groups) for p in program.phases))
        for g in sorted(used_groups.get(node_id, set()) - served):
            out.append(
                Violation("orphan-signal-group", f"signal group {g} at {node_id!r} is in no phase")
            )

    for node_id in sorted(used_groups):
        if nodes.get(node_id) and nodes[node_id].signalized and node_id not in net.signal_programs:
            out.append(Violation("signal-missing", f"signalized node {node_id!r} has no program"))

    return ValidationReport(tuple(out))


# ---------------------------------------------------------------------------
# canonical JSON document

_NUMBER = {"type": "number"}
_STRING = {"type": "string"}

NETWORK_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["intersections", "roads", "connections", "signals"],
    "properties": {
        "format": {"const": NETWORK_FORMAT},
        "version": {"const": NETWORK_VERSION},
        "intersections": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "x", "y", "kind"],
                "additionalProperties": False,
                "properties": {
                    "id": _STRING,
                    "x": _NUMBER,
                    "y": _NUMBER,
                    "kind": {"enum": ["signalized", "boundary"]},
                },
            },
        },
        "roads": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "from", "to", "length", "lanes", "speed_limit"],
                "additionalProperties": False,
                "properties": {
                    "id": _STRING,
                    "from": _STRING,
                    "to": _STRING,
                    "length": _NUMBER,
                    "lanes": {"type": "integer"},
                    "speed_limit": _NUMBER,
                    "class": {"type": ["string", "null"]},
                },
            },
        },
        "connections": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["intersection", "from_lane", "to_lane", "signal_group"],
                "additionalProperties": False,
                "properties": {
                    "intersection": _STRING,
                    "from_lane": _STRING,
                    "to_lane": _STRING,
                    "signal_group": {"type": "integer"},
                },
            },
        },
        "signals": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["offset", "phases"],
                "additionalProperties": False,
                "properties": {
                    "offset": _NUMBER,
                    "phases": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["duration", "groups"],
                            "additionalProperties": False,
                            "properties": {
                                "duration": _NUMBER,
                                "groups": {"type": "array", "items": {"type": "integer"}},
                            },
                        },
                    },
                },
            },
        },
    },
}


def network_to_document(net: RoadNetwork) -> dict[str, Any]:
    return {
        "format": NETWORK_FORMAT,
        "version": NETWORK_VERSION,
        "intersections": [
            {"id": n.id, "x": n.x, "y": n.y, "kind": n.kind} for n in net.intersections
        ],
        "roads": [
            {
                "id": r.id,
                "from": r.from_node,
                "to": r.to_node,
                "length": r.length,
                "lanes": r.lanes,
                "speed_limit": r.speed_limit,
                "class": r.road_class,
            }
            for r in net.roads
        ],
        "connections": [
            {
                "intersection": c.intersection,
                "from_lane": c.from_lane,
                "to_lane": c.to_lane,
                "signal_group": c.signal_group,
            }
            for c in net.connections
        ],
        "signals": {
            node_id: {
                "offset": prog.offset,
                "phases": [
                    {"duration": p.duration, "groups": list(p.groups)} for p in prog.phases
                ],
            }
            for node_id, prog in net.signal_programs.items()
        },
    }


def dump_network(net: RoadNetwork) -> str:
    return json.dumps(network_to_document(net), indent=1, ensure_ascii=False) + "\n"


def _parse(document: str | bytes | Mapping[str, Any]) -> Mapping[str, Any]:
    if isinstance(document, (str, bytes)):
        try:
            return json.loads(document)
        except json.JSONDecodeError as exc:
            raise NetworkSchemaError(
                f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
            ) from exc
    return document


def _field_path(error: jsonschema.ValidationError) -> str:
    parts = []
    for p in error.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "document" + "".join(parts)


def load_network(document: str | bytes | Mapping[str, Any]) -> RoadNetwork:
    """Parse a canonical network document and check it.

    ``document`` may be JSON text or an already-decoded mapping.

    Raises
    ------
    NetworkSchemaError
        Malformed JSON or a field of the wrong shape; the message carries the
        line/column or the offending field path.
    ReferentialIntegrityError
        The document is well formed but ``validate_network`` reports problems.
    """
    doc = _parse(document)
    validator = jsonschema.Draft202012Validator(NETWORK_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        raise NetworkSchemaError(f"{_field_path(first)}: {first.message}")

    net = RoadNetwork(
        intersections=tuple(
            Intersection(n["id"], float(n["x"]), float(n["y"]), n["kind"])
            for n in doc["intersections"]
        ),
        roads=tuple(
            Road(
                r["id"],
                r["from"],
                r["to"],
                float(r["length"]),
                int(r["lanes"]),
                float(r["speed_limit"]),
                r.get("class"),
            )
            for r in doc["roads"]
        ),
        connections=tuple(
            Connection(c["from_lane"], c["to_lane"], c["intersection"], int(c["signal_group"]))
            for c in doc["connections"]
        ),
        signal_programs={
            node_id: SignalProgram(
                tuple(Phase(float(p["duration"]), tuple(p["groups"])) for p in prog["phases"]),
                float(prog["offset"]),
            )
            for node_id, prog in doc["signals"].items()
        },
    )
    report = validate_network(net)
    if report:
        raise ReferentialIntegrityError(report)
    return net


def iter_lanes(net: RoadNetwork) -> Iterable[str]:
    for road in net.roads:
        yield from road.lane_ids
