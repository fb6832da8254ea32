import math

import pytest
from hypothesis import given, settings, strategies as st

from twinflow import engine
from twinflow.behavior import Kinematics, ballistic_update
from twinflow.demand import DriverProfile, Flow, build_demand
from twinflow.engine import (
    EngineConfig,
    EngineError,
    WorldState,
    advance_signals,
    commit_lane_change,
    create_world,
    inject_vehicles,
    run,
    step,
)
from twinflow.metrics import dumps_observations, observe_step
from twinflow.network import generate_grid

from conftest import straight_road


def test_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(dialect="C")
    with pytest.raises(ValueError):
        EngineConfig(dt=0.0)
    with pytest.raises(ValueError):
        EngineConfig(dt=2.0, horizon=1.0)
    with pytest.raises(ValueError):
        EngineConfig(worker_count=0)
    assert EngineConfig(dt=0.7, horizon=10.0).n_steps == math.ceil(10.0 / 0.7)


# -- injection ---------------------------------------------------------------


def test_insert_into_empty_lane():
    net = straight_road()
    world = create_world(net, [Flow("v0", 0.0, ("r",))], EngineConfig())
    (veh,) = world.active.values()
    assert veh.pos == 0.0
    assert veh.speed == pytest.approx(13.89)
    assert world.pending == 0


@pytest.mark.parametrize("dialect", ["A", "B"])
def test_same_depart_one_inserted(dialect):
    net = straight_road()
    flows = [Flow("v0", 0.0, ("r",)), Flow("v1", 0.0, ("r",))]
    world = create_world(net, flows, EngineConfig(dialect=dialect))
    assert len(world.active) == 1
    assert world.pending == 1
    if dialect == "B":
        assert "v0" in world.active  # id order


def test_insertion_order_replays():
    net = generate_grid(2, 2, 1)
    flows = build_demand(net, "uniform", 40, 1.0, seed=4)
    flows = [Flow(f.vehicle_id, 0.0, f.route, f.profile) for f in flows]
    orders = []
    for _ in range(2):
        world = create_world(net, flows, EngineConfig(dialect="A", seed=99))
        orders.append(list(world.active))
    assert orders[0] == orders[1]


def test_duplicate_ids_rejected():
    with pytest.raises(EngineError):
        WorldState(straight_road(), [Flow("v", 0.0, ("r",)), Flow("v", 1.0, ("r",))], EngineConfig())


# -- signals -----------------------------------------------------------------


def test_signal_phase_boundaries():
    net = generate_grid(1, 1, 1)
    world = WorldState(net, [], EngineConfig(dt=1.0))
    assert world.phase == [0]
    for _ in range(29):
        advance_signals(world)
    assert world.phase == [0]  # mid-phase
    advance_signals(world, 1.0)
    assert world.clock == 30.0 and world.phase == [1]
    for _ in range(30):
        advance_signals(world)
    assert world.clock == 60.0 and world.phase == [0]
    with pytest.raises(ValueError):
        advance_signals(world, 0.5)


# -- stepping ----------------------------------------------------------------


@pytest.mark.parametrize("dialect", ["A", "B"])
def test_free_vehicle_follows_closed_form(dialect):
    net = straight_road(5000.0)
    prof = DriverProfile.from_label("aggressive_young")
    world = create_world(net, [Flow("v0", 0.0, ("r",), prof)], EngineConfig(dialect=dialect))
    veh = world.active["v0"]
    veh.speed = 0.0
    a, vmax = prof.aggressiveness.max_accel, 13.89
    x = v = 0.0
    for _ in range(40):
        step(world)
        acc = min(a, vmax - v)  # accelerate until the desired speed is reached
        k = ballistic_update(Kinematics(x, v), acc, 1.0)
        x, v = k.position, k.speed
        assert veh.pos == pytest.approx(x, abs=1e-9)
        assert veh.speed == pytest.approx(v, abs=1e-9)


@pytest.mark.parametrize("dialect", ["A", "B"])
def test_fast_follower_never_collides(dialect):
    net = straight_road(30000.0)
    slow = DriverProfile.from_label("courteous_old", desired_speed_factor=0.3)
    fast = DriverProfile.from_label("aggressive_young", car_following="acc")
    flows = [Flow("lead", 0.0, ("r",), slow), Flow("tail", 5.0, ("r",), fast)]
    world = create_world(net, flows, EngineConfig(dialect=dialect, horizon=1000.0))
    min_gap = math.inf
    for _ in range(1000):
        step(world)
        if len(world.active) == 2:
            lead, tail = world.active["lead"], world.active["tail"]
            min_gap = min(min_gap, lead.pos - lead.length - tail.pos)
    assert world.active["tail"].speed == pytest.approx(world.active["lead"].speed, abs=1e-6)
    assert 0.0 <= min_gap


def _scenario(n=120, lanes=2, seed=1):
    net = generate_grid(2, 2, lanes)
    return net, build_demand(net, "uniform", n, 300.0, seed)


@pytest.mark.parametrize("dialect", ["A", "B"])
def test_replay_byte_identical(dialect):
    net, flows = _scenario()
    cfg = EngineConfig(dialect=dialect, horizon=300.0, seed=5)
    a = dumps_observations(run(net, flows, cfg)[0])
    b = dumps_observations(run(net, flows, cfg)[0])
    assert a == b


def test_workers_bit_identical():
    net, flows = _scenario(200)
    outs = []
    for w in (1, 4):
        obs, summary = run(net, flows, EngineConfig(dialect="A", horizon=300.0, seed=3, worker_count=w))
        outs.append((dumps_observations(obs), summary.to_dict(include_timing=False)))
    assert outs[0] == outs[1]


def test_zero_flows():
    obs, summary = run(generate_grid(2, 2, 1), [], EngineConfig(horizon=50.0))
    assert len(obs) == 50
    assert all(not o.vehicles and not any(o.lane_counts) for o in obs)
    assert (summary.injected, summary.arrived, summary.active, summary.pending) == (0, 0, 0, 0)


def test_invalid_network_rejected():
    net = straight_road()
    broken = type(net)(net.intersections[:1], net.roads, ())
    with pytest.raises(EngineError):
        run(broken, [], EngineConfig(horizon=5.0))


@pytest.mark.parametrize("dialect", ["A", "B"])
def test_accumulators(dialect):
    net, flows = _scenario(150)
    world = create_world(net, flows, EngineConfig(dialect=dialect, horizon=400.0, seed=2))
    prev = {}
    total = len(flows)
    for _ in range(400):
        obs = step(world)
        assert world.injected == len(world.active) + len(world.arrived)
        assert world.injected + world.pending == total
        cur = {}
        for r in obs.vehicles:
            if r.vehicle_id in prev:
                p = prev[r.vehicle_id]
                inc = r.waiting_time - p.waiting_time
                assert inc == (1.0 if r.speed < 0.1 else 0.0)
                assert r.travel_time == p.travel_time + 1.0
            assert r.waiting_time <= r.travel_time
            cur[r.vehicle_id] = r
        prev = cur
    assert world.arrived
    for rec in world.arrived:
        assert rec.travel_time == rec.arrive - rec.depart


# -- lane changes ------------------------------------------------------------


def _wrong_lane_world(dialect):
    net = generate_grid(1, 1, 2)
    # southbound entry turning onto the east exit is served by lane 1 only
    flow = Flow("v0", 0.0, ("b0_0_N__i0_0", "i0_0__b0_0_E"))
    world = create_world(net, [flow], EngineConfig(dialect=dialect))
    veh = world.active["v0"]
    src = world.lanes[veh.lane]
    assert src.k == 1
    dst = world.lanes[src.right]
    src.vehicles.remove(veh)
    veh.lane = dst.idx
    dst.vehicles.append(veh)
    veh.pos = 50.0
    return world, veh


@pytest.mark.parametrize("dialect", ["A", "B"])
def test_lane_change_commit(dialect):
    world, veh = _wrong_lane_world(dialect)
    plan = engine._plan_for(world, veh)
    assert plan is not None and plan.reason == "strategic"
    assert engine._register(world, veh, plan)
    counts = dict(zip(world.lane_id_tuple, observe_step(world).lane_counts))
    # mid-change: the shadow occupies the target lane in A only
    assert counts["b0_0_N__i0_0_1"] == (1 if dialect == "A" else 0)
    assert counts["b0_0_N__i0_0_0"] == 1
    assert len(observe_step(world).vehicles) == 1
    assert commit_lane_change(world, veh)
    counts = dict(zip(world.lane_id_tuple, observe_step(world).lane_counts))
    assert counts["b0_0_N__i0_0_1"] == 1 and counts["b0_0_N__i0_0_0"] == 0
    assert world.lane_changes == 1


@pytest.mark.parametrize("dialect", ["A", "B"])
def test_lane_change_abort(dialect):
    world, veh = _wrong_lane_world(dialect)
    plan = engine._plan_for(world, veh)
    assert engine._register(world, veh, plan)
    # a vehicle appears right beside the changer on the target lane
    blocker = engine.Vehicle("blk", 1, DriverProfile(), veh.route)
    blocker.lane, blocker.pos, blocker.speed = veh.lc_target, veh.pos + 1.0, veh.speed
    world.lanes[veh.lc_target].vehicles.insert(0, blocker)
    engine._sort_lane(world.lanes[veh.lc_target])
    lane_before = veh.lane
    assert not commit_lane_change(world, veh)
    assert veh.lane == lane_before and veh.lc_target is None and veh.shadow is None
    assert world.aborted_lane_changes == 1
    assert all(not v.is_shadow for lane in world.lanes for v in lane.vehicles)


@settings(max_examples=6, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    dialect=st.sampled_from(["A", "B"]),
    model=st.sampled_from(["krauss_default", "krauss_lookahead", "wagner", "wiedemann", "acc"]),
    label=st.sampled_from(["aggressive_young", "courteous_old"]),
    tol=st.sampled_from([0.5, 1.5]),
)
def test_random_runs_hold_invariants(seed, dialect, model, label, tol):
    # the engine raises on any negative gap, speed bound or conservation breach
    net = generate_grid(2, 2, 2)
    prof = DriverProfile.from_label(label, car_following=model, gap_tolerance=tol)
    flows = build_demand(net, "uniform", 250, 400.0, seed, prof)
    obs, summary = run(net, flows, EngineConfig(dialect=dialect, horizon=400.0, seed=seed))
    assert summary.injected == summary.active + summary.arrived
    for o in obs:
        assert all(q <= n for n, q in zip(o.lane_counts, o.queued_counts))
        assert all(r.speed >= 0 for r in o.vehicles)
