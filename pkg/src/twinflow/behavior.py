"""Car-following and lane-changing rules.

All functions here are pure: they look at a :class:`FollowerContext` (one
follower, at most one leader) and return a speed, an acceleration or a plan.
The engine combines them for vehicles with several leaders by taking the
minimum speed over leaders.

Dialect ``"A"`` is the CityFlow-like pipeline, dialect ``"B"`` the SUMO-like
one.  For car-following they differ in two places only: the free speed
(B also respects the visible lookahead distance) and the discretisation of
the stopping-distance quadratic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .demand import DriverProfile

__all__ = [
    "ModelParams",
    "FollowerContext",
    "Kinematics",
    "Neighbor",
    "TargetLane",
    "LaneChangeView",
    "LaneChangePlan",
    "CAR_FOLLOWING_MODELS",
    "DIALECTS",
    "stopping_variant",
    "krauss_safe_speed",
    "leader_travel",
    "stopping_speed",
    "continuous_stopping_speed",
    "free_speed",
    "krauss_speed",
    "in_action_point_dead_zone",
    "wagner_speed",
    "wiedemann_thresholds",
    "wiedemann_mode",
    "wiedemann_speed",
    "acc_accel",
    "acc_speed",
    "model_speed",
    "safety_clip",
    "ballistic_update",
    "collision_avoidance_gap",
    "required_gap",
    "plan_lane_change",
]

CAR_FOLLOWING_MODELS = ("krauss_default", "krauss_lookahead", "wagner", "wiedemann", "acc")
DIALECTS = ("A", "B")


@dataclass(frozen=True)
class ModelParams:
    """Tunable constants of the car-following and lane-change rules.

    Attributes
    ----------
    wagner_beta : float
        Probability that the action-point branch is drawn in a step.
    ap_speed_threshold : float
        Perceptual speed-difference threshold of the action-point dead zone (m/s).
    ap_gap_band : float
        Relative half-width of the dead zone around the desired gap.
    w74_bx_add, w74_bx_mult, w74_z : float
        Wiedemann-74 safety-distance terms; BX = (bx_add + bx_mult * z) * sqrt(v).
    w74_ex : float
        Ratio between the perception distance SDX and the safety distance BX.
    w74_cx : float
        Speed-difference perception scale of the approach threshold SDV.
    w74_opdv_factor : float
        Opening threshold as a multiple of SDV (OPDV = -factor * SDV).
    acc_k_speed, acc_k_gap, acc_k_damp : float
        ACC speed-control gain (1/s), gap gain (1/s^2) and speed-difference gain (1/s).
    acc_switch_margin : float
        Gap beyond the desired gap at which ACC switches to speed control (m).
    lc_speed_margin : float
        Speed deficit (m/s) that motivates a tactical overtaking change.
    lc_overtake_range : float
        Leaders further away than this (m) never motivate an overtake.
    lc_cooldown : float
        Minimum time (s) between two lane changes of the same vehicle.
    """

    wagner_beta: float = 0.5
    ap_speed_threshold: float = 0.5
    ap_gap_band: float = 0.2
    w74_bx_add: float = 2.0
    w74_bx_mult: float = 3.0
    w74_z: float = 0.5
    w74_ex: float = 2.0
    w74_cx: float = 40.0
    w74_opdv_factor: float = 1.5
    acc_k_speed: float = 0.4
    acc_k_gap: float = 0.23
    acc_k_damp: float = 0.07
    acc_switch_margin: float = 2.0
    lc_speed_margin: float = 2.0
    lc_overtake_range: float = 100.0
    lc_cooldown: float = 3.0


@dataclass(frozen=True)
class FollowerContext:
    """Everything a car-following rule may look at for one vehicle.

    ``gap`` is bumper-to-bumper; ``lead_speed`` is ``None`` (and ``gap`` is
    ``inf``) when there is no leader.
    """

    own_speed: float
    lead_speed: float | None
    gap: float
    desired_speed: float
    dt: float
    profile: "DriverProfile"
    lookahead_distance: float = math.inf
    speed_limit: float = math.inf

    @property
    def has_leader(self) -> bool:
        return self.lead_speed is not None and math.isfinite(self.gap)

    def with_leader(self, lead_speed: float | None, gap: float) -> "FollowerContext":
        return replace(self, lead_speed=lead_speed, gap=gap)


@dataclass(frozen=True)
class Kinematics:
    position: float
    speed: float
    accel: float = 0.0


def stopping_variant(dialect: str) -> str:
    """Discretisation of the stopping quadratic used by each dialect."""
    return "hold" if dialect == "A" else "average"


# ---------------------------------------------------------------------------
# Krauss family


def leader_travel(lead_speed: float, decel: float, dt: float) -> float:
    """Distance the leader covers in one step while braking at ``decel``."""
    if lead_speed >= decel * dt:
        return lead_speed * dt - 0.5 * decel * dt * dt
    return lead_speed * lead_speed / (2.0 * decel)


def krauss_safe_speed(ctx: FollowerContext, decel: float | None = None) -> float:
    """Krauss collision-free speed, capped so one ballistic step cannot close the gap.

    ``decel`` defaults to the follower's usual maximum deceleration; the
    safety envelope passes the emergency deceleration instead.
    """
    if not ctx.has_leader:
        return math.inf
    prof = ctx.profile.aggressiveness
    b = abs(prof.max_decel) if decel is None else abs(decel)
    tau = prof.min_headway
    v, vl, g = ctx.own_speed, ctx.lead_speed, ctx.gap
    dt = ctx.dt
    vsafe = vl + (g - vl * tau) / (tau + (v + vl) / (2.0 * b))
    # ballistic travel over the step is (v + v') / 2 * dt
    one_step = 2.0 * (g + leader_travel(vl, b, dt)) / dt - v
    # after the step the follower must still stop behind the leader's stopping point
    disc = dt * dt / 4.0 + (2.0 * g + vl * vl / b - v * dt) / b
    stop = b * (-dt / 2.0 + math.sqrt(disc)) if disc > 0.0 else 0.0
    return max(0.0, min(vsafe, one_step, stop))


def continuous_stopping_speed(distance: float, decel: float) -> float:
    """Continuous-time bound sqrt(2 b d)."""
    return math.sqrt(2.0 * abs(decel) * max(distance, 0.0))


def stopping_speed(ctx: FollowerContext, distance: float, variant: str = "hold") -> float:
    """Largest next-step speed that still stops within ``distance``.

    ``"hold"`` assumes the chosen speed is driven for the whole first step
    (v dt + v^2 / 2b <= d); ``"average"`` accounts for the ballistic average
    of the current and chosen speed over that step
    ((v0 + v) dt / 2 + v^2 / 2b <= d).
    """
    if distance <= 0.0:
        return 0.0
    b = abs(ctx.profile.aggressiveness.max_decel)
    dt = ctx.dt
    if variant == "hold":
        v = b * (-dt + math.sqrt(dt * dt + 2.0 * distance / b))
    elif variant == "average":
        disc = dt * dt / 4.0 + (2.0 * distance - ctx.own_speed * dt) / b
        if disc < 0.0:
            return 0.0
        v = b * (-dt / 2.0 + math.sqrt(disc))
    else:
        raise ValueError(f"unknown stopping variant {variant!r}")
    return max(0.0, v)


def free_speed(ctx: FollowerContext, dialect: str = "A") -> float:
    v = min(ctx.desired_speed, ctx.speed_limit)
    if dialect == "B" and math.isfinite(ctx.lookahead_distance):
        v = min(v, stopping_speed(ctx, ctx.lookahead_distance, "average"))
    return v


def _effective(ctx: FollowerContext) -> FollowerContext:
    """Context with the standstill gap removed from the leader gap."""
    if not ctx.has_leader:
        return ctx
    return ctx.with_leader(ctx.lead_speed, max(0.0, ctx.gap - ctx.profile.aggressiveness.min_gap))


def krauss_speed(ctx: FollowerContext, dialect: str = "A") -> float:
    """Krauss pipeline: min of accelerated, free and safe-following speeds."""
    v = min(free_speed(ctx, dialect), ctx.own_speed + ctx.profile.aggressiveness.max_accel * ctx.dt)
    if ctx.has_leader:
        v = min(v, krauss_safe_speed(_effective(ctx)))
    return max(0.0, v)


def in_action_point_dead_zone(ctx: FollowerContext, params: ModelParams, dialect: str = "A") -> bool:
    """True if the driver does not perceive a reason to change speed."""
    if not ctx.has_leader:
        return abs(ctx.own_speed - free_speed(ctx, dialect)) <= params.ap_speed_threshold
    prof = ctx.profile.aggressiveness
    desired_gap = ctx.own_speed * prof.min_headway
    eff_gap = ctx.gap - prof.min_gap
    return (
        abs(ctx.lead_speed - ctx.own_speed) <= params.ap_speed_threshold
        and abs(eff_gap - desired_gap) <= params.ap_gap_band * desired_gap
    )


def wagner_speed(
    ctx: FollowerContext,
    rng: np.random.Generator | float,
    dialect: str = "A",
    params: ModelParams | None = None,
) -> float:
    """Krauss / action-point mixture.

    ``rng`` is either a generator or a pre-drawn uniform in [0, 1); with
    probability ``wagner_beta`` the action-point branch is used, which holds
    the current speed inside the perceptual dead zone and otherwise reacts
    like Krauss.
    """
    params = params or ctx.profile.params
    u = rng if isinstance(rng, float) else float(rng.random())
    if u < params.wagner_beta and in_action_point_dead_zone(ctx, params, dialect):
        return ctx.own_speed
    return krauss_speed(ctx, dialect)


# ---------------------------------------------------------------------------
# Wiedemann 74


def wiedemann_thresholds(ctx: FollowerContext, params: ModelParams) -> dict[str, float]:
    """Perceptual thresholds ABX, SDX, SDV and OPDV for the current state."""
    ax = ctx.profile.aggressiveness.min_gap
    bx = (params.w74_bx_add + params.w74_bx_mult * params.w74_z) * math.sqrt(max(ctx.own_speed, 0.0))
    abx = ax + bx
    sdx = ax + params.w74_ex * bx
    gap = ctx.gap if ctx.has_leader else math.inf
    sdv = ((max(gap - ax, 0.0)) / params.w74_cx) ** 2
    return {"ABX": abx, "SDX": sdx, "SDV": sdv, "OPDV": -params.w74_opdv_factor * sdv}


def wiedemann_mode(ctx: FollowerContext, params: ModelParams) -> str:
    if not ctx.has_leader:
        return "free"
    th = wiedemann_thresholds(ctx, params)
    dv = ctx.own_speed - ctx.lead_speed  # positive when closing in
    if ctx.gap < th["ABX"] and dv > 0.0:
        return "emergency"
    if dv > th["SDV"]:
        return "approaching"
    if ctx.gap <= th["SDX"] and dv >= th["OPDV"]:
        return "following"
    if ctx.gap < th["ABX"]:
        return "following"
    return "free"


def wiedemann_speed(
    ctx: FollowerContext, params: ModelParams | None = None, dialect: str = "A"
) -> tuple[str, float]:
    params = params or ctx.profile.params
    prof = ctx.profile.aggressiveness
    v, dt = ctx.own_speed, ctx.dt
    vfree = free_speed(ctx, dialect)
    mode = wiedemann_mode(ctx, params)
    if mode == "free":
        speed = min(vfree, v + prof.max_accel * dt)
    elif mode == "following":
        speed = min(vfree, ctx.lead_speed)
    elif mode == "approaching":
        th = wiedemann_thresholds(ctx, params)
        dv = v - ctx.lead_speed
        room = max(ctx.gap - th["ABX"], 0.1)
        a = max(-(dv * dv) / (2.0 * room), prof.max_decel)
        speed = min(vfree, v + a * dt)
    else:
        speed = v + prof.max_emergency_decel * dt
    return mode, max(0.0, speed)


# ---------------------------------------------------------------------------
# ACC


def acc_accel(ctx: FollowerContext, params: ModelParams | None = None) -> float:
    params = params or ctx.profile.params
    prof = ctx.profile.aggressiveness
    desired_gap = prof.min_gap + ctx.own_speed * prof.min_headway
    if not ctx.has_leader or ctx.gap > desired_gap + params.acc_switch_margin:
        a = params.acc_k_speed * (ctx.desired_speed - ctx.own_speed)
    else:
        a = params.acc_k_gap * (ctx.gap - desired_gap) + params.acc_k_damp * (
            ctx.lead_speed - ctx.own_speed
        )
    return min(max(a, prof.max_emergency_decel), prof.max_accel)


def acc_speed(ctx: FollowerContext, params: ModelParams | None = None, dialect: str = "A") -> float:
    return max(0.0, min(free_speed(ctx, dialect), ctx.own_speed + acc_accel(ctx, params) * ctx.dt))


def model_speed(ctx: FollowerContext, dialect: str = "A", draw: float = 1.0) -> float:
    """Proposed next speed of the profile's car-following model.

    ``draw`` is the vehicle's uniform random number for this step (only the
    Wagner mixture consumes it).
    """
    model = ctx.profile.car_following
    if model in ("krauss_default", "krauss_lookahead"):
        return krauss_speed(ctx, dialect)
    if model == "wagner":
        return wagner_speed(ctx, draw, dialect)
    if model == "wiedemann":
        return wiedemann_speed(ctx, dialect=dialect)[1]
    if model == "acc":
        return acc_speed(ctx, dialect=dialect)
    raise ValueError(f"unknown car-following model {model!r}")


def safety_clip(proposed_speed: float, ctx: FollowerContext) -> float:
    """Clamp a proposal into the emergency-braking Krauss envelope."""
    envelope = krauss_safe_speed(ctx, ctx.profile.aggressiveness.max_emergency_decel)
    return max(0.0, min(proposed_speed, envelope))


def ballistic_update(k: Kinematics, accel: float, dt: float) -> Kinematics:
    """Advance one step with constant acceleration, stopping mid-step if needed."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    v_end = k.speed + accel * dt
    if v_end >= 0.0:
        return Kinematics(k.position + k.speed * dt + 0.5 * accel * dt * dt, v_end, accel)
    t_stop = k.speed / -accel
    return Kinematics(k.position + k.speed * t_stop + 0.5 * accel * t_stop * t_stop, 0.0, accel)


# ---------------------------------------------------------------------------
# lane changing


def collision_avoidance_gap(ctx: FollowerContext) -> float:
    """Gap at which the follower needs no braking behind the leader under Krauss."""
    prof = ctx.profile.aggressiveness
    if not ctx.has_leader:
        return prof.min_gap
    b = abs(prof.max_decel)
    tau = prof.min_headway
    v, vl = ctx.own_speed, ctx.lead_speed
    return prof.min_gap + max(0.0, vl * tau + (v - vl) * (tau + (v + vl) / (2.0 * b)))


def required_gap(ctx: FollowerContext, gap_tolerance: float) -> float:
    if gap_tolerance <= 0:
        raise ValueError("gap_tolerance must be > 0")
    return collision_avoidance_gap(ctx) / gap_tolerance


@dataclass(frozen=True)
class Neighbor:
    """A vehicle adjacent to the lane changer on some lane."""

    gap: float  # bumper gap to the changer
    speed: float
    profile: "DriverProfile"


@dataclass(frozen=True)
class TargetLane:
    lane_id: str
    lane_index: int
    serves_route: bool
    distance_to_serving: int  # lanes between this lane and the nearest serving lane
    lead: Neighbor | None
    lag: Neighbor | None


@dataclass(frozen=True)
class LaneChangeView:
    """What a vehicle sees when deciding whether to change lanes."""

    vehicle_id: str
    lane_id: str
    lane_index: int
    own_speed: float
    desired_speed: float
    dt: float
    profile: "DriverProfile"
    serves_route: bool
    distance_to_serving: int
    current_lead: Neighbor | None
    candidates: Sequence[TargetLane]


@dataclass(frozen=True)
class LaneChangePlan:
    vehicle_id: str
    from_lane: str
    to_lane: str
    reason: str  # "strategic" or "tactical"


def gaps_acceptable(view: LaneChangeView, target: TargetLane) -> bool:
    """Both target-lane gaps meet the changer's required gap."""
    tol = view.profile.gap_tolerance
    base = FollowerContext(
        own_speed=view.own_speed,
        lead_speed=None,
        gap=math.inf,
        desired_speed=view.desired_speed,
        dt=view.dt,
        profile=view.profile,
    )
    if target.lead is not None:
        ctx = base.with_leader(target.lead.speed, target.lead.gap)
        if target.lead.gap < required_gap(ctx, tol):
            return False
    if target.lag is not None:
        lag_ctx = FollowerContext(
            own_speed=target.lag.speed,
            lead_speed=view.own_speed,
            gap=target.lag.gap,
            desired_speed=target.lag.speed,
            dt=view.dt,
            profile=target.lag.profile,
        )
        if target.lag.gap < required_gap(lag_ctx, tol):
            return False
    return True


def plan_lane_change(
    view: LaneChangeView, dialect: str = "A", params: ModelParams | None = None
) -> LaneChangePlan | None:
    """Decide on a lane change for this step.

    Strategic changes (current lane cannot reach the next road) are made in
    both dialects toward the nearest serving lane.  Dialect B additionally
    overtakes a slow leader when a neighbouring lane that also serves the
    route is faster.
    """
    params = params or view.profile.params
    if not view.candidates:
        return None
    if not view.serves_route:
        better = [c for c in view.candidates if c.distance_to_serving < view.distance_to_serving]
        better.sort(key=lambda c: (c.distance_to_serving, -c.lane_index))
        for cand in better:
            if gaps_acceptable(view, cand):
                return LaneChangePlan(view.vehicle_id, view.lane_id, cand.lane_id, "strategic")
        return None
    if dialect != "B":
        return None
    lead = view.current_lead
    if lead is None or lead.gap > params.lc_overtake_range:
        return None
    if lead.speed >= view.desired_speed - params.lc_speed_margin:
        return None
    # prefer overtaking on the left (higher lane index)
    for cand in sorted(view.candidates, key=lambda c: -c.lane_index):
        if not cand.serves_route:
            continue
        cand_lead = cand.lead
        if cand_lead is not None and cand_lead.gap <= params.lc_overtake_range:
            if cand_lead.speed <= lead.speed + params.lc_speed_margin:
                continue
        if gaps_acceptable(view, cand):
            return LaneChangePlan(view.vehicle_id, view.lane_id, cand.lane_id, "tactical")
    return None
