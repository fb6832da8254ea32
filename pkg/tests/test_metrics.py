import io
import math

import pytest
from hypothesis import given, settings, strategies as st

from twinflow.demand import Flow, build_demand
from twinflow.engine import EngineConfig, create_world, run
from twinflow.metrics import (
    MEASURES,
    REPORT_FIELDS,
    ArrivalNote,
    MetricsError,
    NoOverlapError,
    StepObservation,
    VehicleRecord,
    dumps_observations,
    equivalence_report,
    kl_divergence,
    kl_report,
    observe_step,
    read_observations,
    report_to_csv,
    rmse_report,
)
from twinflow.network import generate_grid

from conftest import straight_road


def obs(counts, queued=None, vehicles=(), lanes=None, clock=0.0, arrivals=()):
    lanes = lanes or tuple(f"l{i}" for i in range(len(counts)))
    return StepObservation(
        clock, tuple(vehicles), tuple(lanes), tuple(counts),
        tuple(queued if queued is not None else [0] * len(counts)), tuple(arrivals),
    )


def rec(vid, speed=1.0, accel=0.0, travel=1.0, waiting=0.0, lane="l0"):
    return VehicleRecord(vid, speed, accel, travel, waiting, lane)


# -- observation ---------------------------------------------------------------


def test_queue_threshold_strict():
    net = straight_road(lanes=2)
    world = create_world(net, [Flow("a", 0.0, ("r",)), Flow("b", 0.0, ("r",))], EngineConfig(dialect="B"))
    a, b = world.active["a"], world.active["b"]
    assert a.lane != b.lane  # the second insert takes the free lane
    a.speed, b.speed = 0.05, 0.1
    o = observe_step(world)
    q = dict(zip(o.lane_ids, o.queued_counts))
    assert q[world.lanes[a.lane].id] == 1
    assert q[world.lanes[b.lane].id] == 0


def test_empty_world():
    net = generate_grid(1, 1, 1)
    world = create_world(net, [], EngineConfig())
    o = observe_step(world)
    assert o.vehicles == ()
    assert set(o.lane_counts) == {0} and set(o.queued_counts) == {0}
    assert len(o.lane_ids) == len(net.roads)


# -- RMSE --------------------------------------------------------------------


def test_rmse_one_cell_example():
    r = rmse_report([obs([3])], [obs([5])])
    assert r["rmse_lane_count"] == pytest.approx(2.0, rel=1e-12)


def test_rmse_identity_is_zero():
    stream = [
        obs([2, 1], [1, 0], [rec("x", 0.0, -1.0, 3.0, 1.0), rec("y", 5.0, 1.0, 2.0, 0.0, "l1")], clock=t)
        for t in range(5)
    ]
    r = rmse_report(stream, list(stream))
    assert all(r[m] == 0.0 for m in MEASURES[:6])


def test_rmse_per_step_then_mean():
    a = [obs([0], vehicles=[rec("x", speed=1.0)]), obs([0], vehicles=[rec("x", speed=1.0), rec("y", speed=0.0)])]
    b = [obs([0], vehicles=[rec("x", speed=3.0)]), obs([0], vehicles=[rec("x", speed=1.0), rec("y", speed=2.0)])]
    r = rmse_report(a, b)
    # step 1: sqrt(4) = 2; step 2: sqrt((0 + 4) / 2) = sqrt 2
    assert r["rmse_speed"] == pytest.approx((2.0 + math.sqrt(2.0)) / 2, rel=1e-12)
    g = rmse_report(a, b, global_rmse=True)
    assert g["rmse_speed"] == pytest.approx(math.sqrt(8.0 / 3.0), rel=1e-12)


def test_arrived_totals_carried_forward():
    a = [obs([1], vehicles=[rec("x", travel=1.0)]), obs([0], arrivals=[ArrivalNote("x", 2.0, 0.0)])]
    b = [obs([1], vehicles=[rec("x", travel=1.0)]), obs([1], vehicles=[rec("x", travel=2.0)])]
    c = [obs([1], vehicles=[rec("x", travel=1.0)]), obs([1], vehicles=[rec("x", travel=5.0)])]
    assert rmse_report(a, b)["rmse_travel_time"] == 0.0
    r = rmse_report(a, c)
    assert r["rmse_travel_time"] == pytest.approx(1.5)
    assert r["coverage_time"] == 1.0
    assert r["coverage_kinematic"] == 0.5  # x is active in c only at step 2


def test_no_overlap():
    a = [obs([1], vehicles=[rec("x")])]
    b = [obs([1], vehicles=[rec("y")])]
    with pytest.raises(NoOverlapError):
        rmse_report(a, b)


def test_mismatched_streams():
    with pytest.raises(MetricsError):
        rmse_report([obs([1])], [obs([1]), obs([1])])
    with pytest.raises(MetricsError):
        rmse_report([obs([1], lanes=["p"])], [obs([1], lanes=["q"])])


count_lists = st.lists(st.integers(0, 9), min_size=3, max_size=3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(count_lists, count_lists, count_lists, count_lists), min_size=1, max_size=6))
def test_rmse_symmetric_and_relabel_invariant(steps):
    a = [obs(c1, [min(x, y) for x, y in zip(c1, q1)]) for c1, q1, _, _ in steps]
    b = [obs(c2, [min(x, y) for x, y in zip(c2, q2)]) for _, _, c2, q2 in steps]
    r_ab, r_ba = rmse_report(a, b), rmse_report(b, a)
    for m in MEASURES[:6]:
        assert r_ab[m] == r_ba[m] >= 0.0
    perm = [2, 0, 1]
    relabel = lambda s: [
        obs([o.lane_counts[i] for i in perm], [o.queued_counts[i] for i in perm],
            lanes=[o.lane_ids[i] for i in perm])
        for o in s
    ]
    r_perm = rmse_report(relabel(a), relabel(b))
    assert r_perm["rmse_lane_count"] == pytest.approx(r_ab["rmse_lane_count"], rel=1e-12)


# -- KL ----------------------------------------------------------------------


def test_kl_two_bin_example():
    expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.14384, abs=1e-5)
    # through the report with counts that normalize to the same distributions
    k = kl_report([obs([2, 2])], [obs([1, 3])], smoothing=1e-12)["kl_count"]
    assert k == pytest.approx(expected, rel=1e-9)


def test_kl_identity_and_empty():
    s = [obs([1, 4, 0], [0, 2, 0]), obs([0, 0, 0])]
    assert kl_report(s, list(s)) == {"kl_count": 0.0, "kl_queued": 0.0}
    assert kl_report([obs([0, 0])], [obs([0, 0])])["kl_count"] == 0.0


def test_kl_asymmetric():
    a, b = [obs([3, 1, 0])], [obs([1, 1, 1])]
    assert kl_report(a, b)["kl_count"] != pytest.approx(kl_report(b, a)["kl_count"], rel=1e-3)


def test_kl_smoothing_sensitivity():
    a, b = [obs([10, 0])], [obs([0, 10])]
    eps = [1e-2, 1e-4, 1e-6, 1e-8]
    vals = [kl_report(a, b, e)["kl_count"] for e in eps]
    assert all(x < y for x, y in zip(vals, vals[1:]))  # decreasing in eps
    # KL ~ ln(10 / eps) as eps -> 0
    for e, v in zip(eps[2:], vals[2:]):
        assert v == pytest.approx(math.log(10.0 / e), rel=1e-3)
    mid = kl_report(a, b, 1e-4 * (1 + 1e-9))["kl_count"]
    assert mid == pytest.approx(vals[1], rel=1e-6)  # continuous
    with pytest.raises(MetricsError):
        kl_report(a, b, 0.0)


# -- report and files ----------------------------------------------------------


def test_equivalence_report_fields():
    net = generate_grid(2, 2, 2)
    flows = build_demand(net, "uniform", 60, 120.0, seed=0)
    oa, _ = run(net, flows, EngineConfig(dialect="A", horizon=120.0))
    rep = equivalence_report(oa, oa, scenario="s", seed=0, dialect_b="A")
    assert all(v == 0.0 for v in rep.measures().values())
    assert tuple(rep.to_dict()) == REPORT_FIELDS
    header, row = report_to_csv([rep]).splitlines()
    assert header.split(",") == list(REPORT_FIELDS)
    assert len(row.split(",")) == len(REPORT_FIELDS)


def test_observation_file_round_trip():
    net = generate_grid(1, 1, 1)
    flows = build_demand(net, "uniform", 10, 60.0, seed=1)
    stream, _ = run(net, flows, EngineConfig(horizon=60.0))
    text = dumps_observations(stream, {"k": 1})
    back, meta = read_observations(io.StringIO(text))
    assert meta == {"k": 1}
    assert back == stream
    with pytest.raises(MetricsError):
        read_observations(io.StringIO(""))
