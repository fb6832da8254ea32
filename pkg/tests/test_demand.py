import math

import pytest
from hypothesis import given, settings, strategies as st

from twinflow.demand import (
    AGGRESSIVENESS_TYPES,
    DemandError,
    DriverProfile,
    Flow,
    FlowSchemaError,
    NegativeRateError,
    NoRouteError,
    UnknownProfileError,
    build_demand,
    convert_flows,
    dump_flows,
    flows_from_document,
    make_profile,
    route_is_connected,
    shortest_route,
)
from twinflow.network import generate_arterial, generate_grid

# rows of the aggressiveness table: accel, decel, emergency decel, min gap, headway
TABLE = {
    "aggressive_young": (3.1, -5.5, -9.0, 1.2, 1.0),
    "courteous_young": (2.5, -4.5, -9.0, 2.5, 1.0),
    "aggressive_middle_aged": (2.9, -5.0, -9.0, 2.0, 1.3),
    "courteous_middle_aged": (2.4, -4.1, -9.0, 2.5, 1.5),
    "aggressive_old": (2.6, -4.5, -9.0, 2.0, 1.7),
    "courteous_old": (2.3, -3.8, -9.0, 2.5, 1.9),
}


@pytest.mark.parametrize("label", sorted(TABLE))
def test_make_profile_matches_table(label):
    p = make_profile(label)
    assert (p.max_accel, p.max_decel, p.max_emergency_decel, p.min_gap, p.min_headway) == TABLE[label]
    assert p.max_accel > 0
    assert p.max_emergency_decel <= p.max_decel < 0
    assert p.min_gap > 0 and p.min_headway > 0


def test_six_types_only():
    assert set(AGGRESSIVENESS_TYPES) == set(TABLE)
    with pytest.raises(UnknownProfileError):
        make_profile("reckless_teen")


def test_driver_profile_validation():
    with pytest.raises(ValueError):
        DriverProfile(gap_tolerance=0.0)
    with pytest.raises(ValueError):
        DriverProfile(vehicle_length=-1.0)
    with pytest.raises(ValueError):
        DriverProfile(car_following="idm")


def test_driver_profile_dict_round_trip():
    p = DriverProfile.from_label("courteous_old", car_following="wiedemann", gap_tolerance=1.18)
    assert DriverProfile.from_dict(p.to_dict()) == p


def test_zero_demand():
    assert build_demand(generate_grid(2, 2), "uniform", 0, 3600.0, seed=1) == []


def test_grid4x4_demand_connected():
    net = generate_grid(4, 4, 3)
    flows = build_demand(net, "uniform", 1473, 3600.0, seed=3)
    assert len(flows) == 1473
    assert len({f.vehicle_id for f in flows}) == 1473
    assert all(route_is_connected(net, f.route) for f in flows)
    assert all(0 <= f.depart < 3600.0 for f in flows)
    sources = {r.id for r in net.source_roads()}
    sinks = {r.id for r in net.sink_roads()}
    assert all(f.route[0] in sources and f.route[-1] in sinks for f in flows)


def test_same_seed_same_flows():
    net = generate_grid(2, 2, 2)
    a = dump_flows(build_demand(net, "uniform", 200, 1800.0, seed=11))
    b = dump_flows(build_demand(net, "uniform", 200, 1800.0, seed=11))
    c = dump_flows(build_demand(net, "uniform", 200, 1800.0, seed=12))
    assert a == b
    assert a != c


def test_alternating_needs_classes():
    with pytest.raises(DemandError):
        build_demand(generate_grid(2, 2), "alternating_major_minor", 10, 100.0)


def test_alternating_emphasis():
    net = generate_arterial(4, 4, 2, 1)
    flows = build_demand(net, "alternating_major_minor", 4000, 2400.0, seed=0)
    cls = net.road_by_id
    first = [f for f in flows if f.depart < 600]
    second = [f for f in flows if 600 <= f.depart < 1200]
    share_first = sum(cls[f.route[0]].road_class == "major" for f in first) / len(first)
    share_second = sum(cls[f.route[0]].road_class == "major" for f in second) / len(second)
    assert share_first == pytest.approx(0.8, abs=0.04)
    assert share_second == pytest.approx(0.2, abs=0.04)


def _oracle_cost(net, origin, dest):
    # Bellman-Ford over roads, cost = travel time at the speed limit
    roads = net.road_by_id
    cost = {r: math.inf for r in roads}
    cost[origin] = roads[origin].length / roads[origin].speed_limit
    for _ in range(len(roads)):
        changed = False
        for a, nexts in net.successors.items():
            for b in nexts:
                c = cost[a] + roads[b].length / roads[b].speed_limit
                if c < cost[b] - 1e-12:
                    cost[b] = c
                    changed = True
        if not changed:
            break
    return cost[dest]


def test_shortest_route_optimal():
    net = generate_grid(3, 3, 1)
    roads = net.road_by_id
    for o in net.source_roads():
        for d in net.sink_roads():
            if d.to_node == o.from_node:
                continue
            route = shortest_route(net, o.id, d.id)
            assert route_is_connected(net, route)
            cost = sum(roads[r].length / roads[r].speed_limit for r in route)
            assert cost == pytest.approx(_oracle_cost(net, o.id, d.id), rel=1e-12)


def test_no_route():
    net = generate_grid(1, 1, 1)
    sink = net.sink_roads()[0]
    source = net.source_roads()[0]
    with pytest.raises(NoRouteError):
        shortest_route(net, sink.id, source.id)


def test_flow_invariants():
    with pytest.raises(ValueError):
        Flow("v", 0.0, ())
    with pytest.raises(ValueError):
        Flow("v", -1.0, ("r",))


def test_convert_rate_interval():
    doc = {"flows": [{"id": "f", "begin": 0, "end": 3, "rate": 1.0, "route": "a b"}]}
    flows = convert_flows(doc)
    assert [f.depart for f in flows] == [0.0, 1.0, 2.0]
    assert all(f.route == ("a", "b") for f in flows)


def test_convert_rate_zero_and_negative():
    doc = {"flows": [{"id": "f", "begin": 0, "end": 3, "rate": 0.0, "route": "a"}]}
    assert convert_flows(doc) == []
    doc["flows"][0]["rate"] = -1.0
    with pytest.raises(NegativeRateError):
        convert_flows(doc)


def test_convert_cityflow_interval():
    doc = [{"vehicle": {"maxPosAcc": 2.0}, "route": ["a", "b"], "interval": 2.0, "startTime": 0, "endTime": 5}]
    flows = convert_flows(doc)
    assert [f.depart for f in flows] == [0.0, 2.0, 4.0]
    assert flows[0].profile.aggressiveness.max_accel == 2.0


def test_convert_single_vehicle_identity():
    net = generate_grid(2, 2, 1)
    flows = build_demand(net, "uniform", 20, 100.0, seed=2)
    doc = [{"id": f.vehicle_id, "depart": f.depart, "route": list(f.route)} for f in reversed(flows)]
    back = convert_flows(doc, profile=flows[0].profile)
    assert back == flows  # normalized back into depart order


def test_convert_schema_errors():
    with pytest.raises(FlowSchemaError):
        convert_flows("{not json")
    with pytest.raises(FlowSchemaError):
        convert_flows({"flows": [{"id": "f", "begin": 0, "end": 3, "route": "a"}]})
    with pytest.raises(FlowSchemaError):
        flows_from_document([{"id": "x", "route": ["a"]}])


@settings(max_examples=15, deadline=None)
@given(n=st.integers(0, 60), seed=st.integers(0, 2**32 - 1), horizon=st.floats(10.0, 5000.0))
def test_demand_pure_and_connected(n, seed, horizon):
    net = generate_grid(2, 3, 1)
    a = build_demand(net, "uniform", n, horizon, seed)
    assert a == build_demand(net, "uniform", n, horizon, seed)
    assert len(a) == n
    assert all(route_is_connected(net, f.route) for f in a)
    assert [f.depart for f in a] == sorted(f.depart for f in a)
