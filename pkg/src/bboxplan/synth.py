"""Deterministic synthetic driving scenarios.

Every scenario is a straight two-lane road laid down at a random position and
heading in the world plane.  The ego vehicle drives in the right lane; the
kind of scenario decides what the other agents do and how the expert reacts:

``straight``     free driving at constant speed, traffic in the other lane
``lead_brake``   the car ahead brakes to a stop, the expert stops behind it
``crosswalk``    a pedestrian crosses ahead, the expert stops before the crossing
``lane_change``  a slow car ahead, the expert moves to the left lane
"""
from __future__ import annotations

import math

import numpy as np

from .composite import GridLayout, detect_agents
from .domain import CAR, PEDESTRIAN, Agent, EgoState, MapElement, Scenario, validate_scenario
from .geometry import wrap

KINDS = ("straight", "lead_brake", "crosswalk", "lane_change")

DT = 0.5
T_PAST = 4
T_FUTURE = 16

LANE_WIDTH = 3.5
EGO_LANE = -LANE_WIDTH / 2
LEFT_LANE = LANE_WIDTH / 2
SIDEWALK = 5.5
ROAD_START, ROAD_END = -20.0, 120.0


class _Road:
    """Road-aligned (s, l) coordinates mapped into the world plane."""

    def __init__(self, origin, heading):
        self.ox, self.oy = origin
        self.heading = heading
        self.c, self.s = math.cos(heading), math.sin(heading)

    def xy(self, s, l):
        return (self.ox + s * self.c - l * self.s, self.oy + s * self.s + l * self.c)

    def pose(self, s, l, rel_yaw=0.0):
        x, y = self.xy(s, l)
        return (x, y, wrap(self.heading + rel_yaw))

    def line(self, l, s0=ROAD_START, s1=ROAD_END, step=40.0):
        ss = list(np.arange(s0, s1, step)) + [s1]
        return tuple(tuple(float(v) for v in self.xy(s, l)) for s in ss)


def _times(n_frames, t_past, dt):
    # frame t_past - 1 is "now"
    return [(i - (t_past - 1)) * dt for i in range(n_frames)]


def _track(road, s_fn, l_fn, times, v_fn):
    rows = []
    for t in times:
        s, l = s_fn(t), l_fn(t)
        x, y, yaw = road.pose(s, l)
        rows.append((float(x), float(y), float(yaw), float(v_fn(t))))
    return tuple(rows)


def _stop_profile(s0, v0, t_brake, decel):
    """Position/speed of constant speed ``v0`` then constant ``decel`` to rest."""
    t_stop = t_brake + v0 / decel

    def pos(t):
        if t <= t_brake:
            return s0 + v0 * t
        tau = min(t, t_stop) - t_brake
        return s0 + v0 * t_brake + v0 * tau - 0.5 * decel * tau * tau

    def speed(t):
        if t <= t_brake:
            return v0
        return max(v0 - decel * (t - t_brake), 0.0)

    return pos, speed


def _smoothstep(u):
    u = min(max(u, 0.0), 1.0)
    return u * u * u * (10 - 15 * u + 6 * u * u)


def _smoothstep_rate(u):
    if u <= 0 or u >= 1:
        return 0.0
    return 30 * u * u * (1 - u) * (1 - u)


def generate_scenario(kind: str, seed: int, layout: GridLayout = None) -> Scenario:
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    layout = layout or GridLayout()
    rng = np.random.default_rng([int(seed), KINDS.index(kind)])
    road = _Road(tuple(float(v) for v in rng.uniform(-50.0, 50.0, size=2)),
                 float(rng.uniform(-math.pi, math.pi)))
    n_frames = T_PAST + T_FUTURE
    times = _times(n_frames, T_PAST, DT)
    v0 = float(rng.uniform(6.0, 12.0))

    map_elems = [
        MapElement("road", road.line(0.0), LANE_WIDTH),
        MapElement("lane", road.line(EGO_LANE), LANE_WIDTH / 2),
        MapElement("lane", road.line(LEFT_LANE), LANE_WIDTH / 2),
        MapElement("sidewalk", road.line(-SIDEWALK)),
        MapElement("sidewalk", road.line(SIDEWALK)),
    ]
    agents = []
    ego_s = lambda t: v0 * t  # noqa: E731
    ego_l = lambda t: EGO_LANE  # noqa: E731
    ego_yaw = lambda t: 0.0  # noqa: E731

    if kind == "straight":
        sa, va = float(rng.uniform(-15.0, 40.0)), float(rng.uniform(6.0, 12.0))
        agents.append(Agent(1, float(rng.uniform(0.8, 1.0)),
                            _track(road, lambda t: sa + va * t, lambda t: LEFT_LANE, times, lambda t: va)))
        sp, vp = float(rng.uniform(0.0, 50.0)), float(rng.uniform(0.8, 1.5))
        agents.append(Agent(2, 0.4, _track(road, lambda t: sp + vp * t, lambda t: -SIDEWALK - 0.5,
                                           times, lambda t: vp)))

    elif kind == "lead_brake":
        gap = float(rng.uniform(20.0, 30.0))
        t_brake = float(rng.uniform(0.5, 2.0))
        a_lead = float(rng.uniform(2.5, 4.0))
        lead_pos, lead_speed = _stop_profile(gap, v0, t_brake, a_lead)
        agents.append(Agent(1, float(rng.uniform(0.8, 1.0)),
                            _track(road, lead_pos, lambda t: EGO_LANE, times, lead_speed)))
        lead_stop = lead_pos(1e9)
        t_react = t_brake + 0.5
        room = lead_stop - 6.0 - v0 * t_react
        ego_s, _ = _stop_profile(0.0, v0, t_react, v0 * v0 / (2.0 * room))

    elif kind == "crosswalk":
        s_cross = float(rng.uniform(30.0, 45.0))
        map_elems.append(MapElement("crosswalk", (road.xy(s_cross, -SIDEWALK), road.xy(s_cross, SIDEWALK))))
        map_elems.append(MapElement("traffic_signal", (road.xy(s_cross - 3.0, -SIDEWALK + 1.0),
                                                       road.xy(s_cross - 3.0, -SIDEWALK + 1.5))))
        t_walk, v_ped = float(rng.uniform(-1.0, 1.0)), float(rng.uniform(1.0, 1.4))
        l_ped = lambda t: -SIDEWALK - 0.5 + v_ped * max(t - t_walk, 0.0)  # noqa: E731
        agents.append(Agent(1, 0.4, _track(road, lambda t: s_cross, l_ped, times,
                                           lambda t: v_ped if t > t_walk else 0.0)))
        stop_at = s_cross - 5.0
        ego_s, _ = _stop_profile(0.0, v0, 0.0, v0 * v0 / (2.0 * stop_at))

    elif kind == "lane_change":
        gap = float(rng.uniform(35.0, 45.0))
        v_slow = v0 - float(rng.uniform(2.0, 4.0))
        agents.append(Agent(1, float(rng.uniform(0.8, 1.0)),
                            _track(road, lambda t: gap + v_slow * t, lambda t: EGO_LANE, times,
                                   lambda t: v_slow)))
        t_start, dur = float(rng.uniform(0.0, 1.0)), 4.0
        ego_l = lambda t: EGO_LANE + LANE_WIDTH * _smoothstep((t - t_start) / dur)  # noqa: E731
        ego_yaw = lambda t: math.atan2(  # noqa: E731
            LANE_WIDTH * _smoothstep_rate((t - t_start) / dur) / dur, v0)

    history = []
    for t in times[:T_PAST]:
        x, y, yaw = road.pose(ego_s(t), ego_l(t), ego_yaw(t))
        history.append(EgoState(float(x), float(y), float(yaw), v0))
    future = []
    for t in times[T_PAST:]:
        x, y, yaw = road.pose(ego_s(t), ego_l(t), ego_yaw(t))
        future.append((float(x), float(y), float(yaw)))

    agents = tuple(agents)
    class_of = {a.id: (PEDESTRIAN if a.radius < 0.75 else CAR) for a in agents}
    detections = detect_agents(agents, history, range(T_PAST), layout, class_of.__getitem__)
    sc = Scenario(
        id=f"{kind}-{seed}", dt=DT, t_past=T_PAST, T_future=T_FUTURE,
        map=tuple(map_elems), agents=agents, detections=detections,
        ego_history=tuple(history), ego_future=tuple(future),
    )
    return validate_scenario(sc, layout.size)


def generate_mixed(count: int, seed: int = 0, kinds=KINDS, layout: GridLayout = None) -> list:
    """``count`` scenarios cycling through ``kinds`` with seeds ``seed, seed+1, ...``."""
    return [generate_scenario(kinds[i % len(kinds)], seed + i, layout) for i in range(count)]
