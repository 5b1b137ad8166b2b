"""Closed-loop replay simulation and driving metrics.

Agents replay their logged tracks.  At every step the planner sees the
simulated ego history plus detections re-projected from that history, the ego
is moved onto the first planned waypoint, and the loop repeats for the
scenario horizon.  Metrics are pure functions of the resulting log and the
scenario.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from typing import Callable, Optional

import numpy as np

from .composite import GridLayout, detect_agents
from .domain import EgoState, PlannedTrajectory, Scenario, _map_record
from .errors import BBoxPlanError
from .geometry import from_ego_frame, point_to_polyline_distance, signed_lateral_offset, to_ego_frame, wrap
from .objective import EGO_RADIUS

LEAD_LATERAL_M = 2.0
MIN_GAP_SPEED = 0.1
STOPPED_SPEED = 0.5

Planner = Callable[[Scenario], PlannedTrajectory]


@dataclass
class SimLog:
    scenario_id: str
    dt: float
    start: EgoState
    ego: np.ndarray          # [steps, 4] x, y, yaw, v after each step
    plans: list              # per step, [T, 3] world-frame plan
    agents: np.ndarray       # [steps, K, 4] agent states at each step

    @property
    def steps(self):
        return len(self.ego)

    def to_record(self, scenario: Optional[Scenario] = None) -> dict:
        rec = {
            "scenario_id": self.scenario_id,
            "dt": self.dt,
            "start": [self.start.x, self.start.y, self.start.yaw, self.start.v],
            "ego": self.ego.tolist(),
            "plans": [p.tolist() for p in self.plans],
            "agents": self.agents.tolist(),
        }
        if scenario is not None:
            rec["map"] = [_map_record(m) for m in scenario.map]
            rec["radii"] = [a.radius for a in scenario.agents]
        return rec

    @classmethod
    def from_record(cls, rec):
        k = len(rec["agents"][0]) if rec["agents"] else 0
        return cls(
            scenario_id=rec["scenario_id"], dt=float(rec["dt"]), start=EgoState(*rec["start"]),
            ego=np.asarray(rec["ego"], dtype=np.float64).reshape(-1, 4),
            plans=[np.asarray(p, dtype=np.float64) for p in rec["plans"]],
            agents=np.asarray(rec["agents"], dtype=np.float64).reshape(len(rec["ego"]), k, 4),
        )


# ---------------------------------------------------------------- planners

def model_planner(params, cfg) -> Planner:
    from .planner import plan

    return lambda view: plan(view, params, cfg)


def expert_planner(view: Scenario) -> PlannedTrajectory:
    """Replays the logged expert: the perfect-imitation stub."""
    return PlannedTrajectory(to_ego_frame(view.ego, view.expert_world()), view.dt)


def standstill_planner(view: Scenario) -> PlannedTrajectory:
    return PlannedTrajectory(np.zeros((view.T_future, 3)), view.dt)


# ---------------------------------------------------------------- simulation

def _agent_states(scenario, frame):
    rows = []
    for a in scenario.agents:
        tr = a.track
        rows.append(tr[min(frame, len(tr) - 1)])
    return np.asarray(rows, dtype=np.float64).reshape(len(scenario.agents), 4)


def planning_view(scenario: Scenario, history, step: int, layout: GridLayout) -> Scenario:
    """What the planner sees ``step`` ticks into the closed loop."""
    t = scenario.t_past
    window = tuple(history[-t:])
    frames = range(step, step + t)
    dets = detect_agents(scenario.agents, window, frames, layout, scenario.agent_class)
    future = list(scenario.ego_future[step:])
    future += [future[-1]] * (scenario.T_future - len(future))
    agents = tuple(replace(a, track=a.track[step:]) for a in scenario.agents)
    return replace(scenario, ego_history=window, detections=dets, ego_future=tuple(future),
                   agents=agents)


def run_closed_loop(scenario: Scenario, planner: Planner, layout: GridLayout = None) -> SimLog:
    layout = layout or GridLayout()
    if scenario.T_future < 1:
        raise BBoxPlanError("scenario horizon must be at least one step")
    history = list(scenario.ego_history)
    ego_rows, plans, agent_rows = [], [], []
    for step in range(scenario.T_future):
        view = planning_view(scenario, history, step, layout)
        try:
            traj = planner(view)
        except BBoxPlanError as exc:
            raise BBoxPlanError(f"step {step}: {exc}") from exc
        cur = history[-1]
        world = from_ego_frame(cur, traj.waypoints)
        x, y, yaw = world[0]
        v = math.hypot(x - cur.x, y - cur.y) / scenario.dt
        state = EgoState(float(x), float(y), wrap(float(yaw)), float(v))
        history.append(state)
        ego_rows.append((state.x, state.y, state.yaw, state.v))
        plans.append(world)
        agent_rows.append(_agent_states(scenario, scenario.t_past + step))
    return SimLog(scenario.id, scenario.dt, scenario.ego, np.asarray(ego_rows), plans,
                  np.asarray(agent_rows).reshape(len(ego_rows), len(scenario.agents), 4))


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    collision_rate: Optional[float] = None
    offroad_rate: Optional[float] = None
    min_time_gap: Optional[float] = None
    min_ttc: Optional[float] = None
    lon_vel_err: Optional[float] = None
    stop_pos_err: Optional[float] = None
    lat_pos_err: Optional[float] = None
    max_jerk: Optional[float] = None
    max_accel: Optional[float] = None
    max_steer_rate: Optional[float] = None
    oscillation: Optional[float] = None
    progress_l2: Optional[float] = None


METRIC_FIELDS = tuple(f.name for f in fields(MetricsReport))


def time_to_collision(dp, dv, radius) -> float:
    """Earliest ``t >= 0`` with ``|dp + dv t| <= radius``; ``inf`` if never."""
    c = dp[0] * dp[0] + dp[1] * dp[1] - radius * radius
    if c <= 0:
        return 0.0
    a = dv[0] * dv[0] + dv[1] * dv[1]
    b = 2.0 * (dp[0] * dv[0] + dp[1] * dv[1])
    if a == 0 or b >= 0:
        return math.inf
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return math.inf
    # numerically stable smaller root
    return 2.0 * c / (-b + math.sqrt(disc))


def _velocity(yaw, speed):
    return np.array([math.cos(yaw) * speed, math.sin(yaw) * speed])


def traffic_rule_metrics(log: SimLog, scenario: Scenario):
    """``(collision_rate, offroad_rate, min_time_gap, min_ttc)``."""
    radii = [a.radius for a in scenario.agents]
    drivable = [m for m in scenario.map if m.kind in ("road", "lane") and m.half_width is not None]
    collided = offroad = 0
    gaps, ttc = [], math.inf
    for k in range(log.steps):
        ex, ey, eyaw, ev = log.ego[k]
        hit = False
        for j, r in enumerate(radii):
            ax, ay, ayaw, av = log.agents[k, j]
            if math.hypot(ax - ex, ay - ey) < EGO_RADIUS + r:
                hit = True
            t = time_to_collision((ax - ex, ay - ey),
                                  _velocity(ayaw, av) - _velocity(eyaw, ev), EGO_RADIUS + r)
            ttc = min(ttc, t)
        collided += hit
        if drivable:
            offroad += all(point_to_polyline_distance((ex, ey), m.points) > m.half_width
                           for m in drivable)
        if ev >= MIN_GAP_SPEED and radii:
            rel = to_ego_frame((ex, ey, eyaw), log.agents[k, :, :2])
            ahead = (rel[:, 0] > 0) & (np.abs(rel[:, 1]) <= LEAD_LATERAL_M)
            if ahead.any():
                gaps.append(float(rel[ahead, 0].min()) / ev)
    steps = max(log.steps, 1)
    return (collided / steps, offroad / steps if drivable else None,
            float(min(gaps)) if gaps else None, float(ttc))


def expert_speeds(scenario: Scenario) -> np.ndarray:
    pts = np.vstack([[scenario.ego.x, scenario.ego.y], scenario.expert_world()[:, :2]])
    return np.linalg.norm(np.diff(pts, axis=0), axis=1) / scenario.dt


def human_similarity_metrics(log: SimLog, scenario: Scenario):
    """``(lon_vel_err, stop_pos_err, lat_pos_err)`` against the expert track."""
    expert = scenario.expert_world()[: log.steps]
    v_exp = expert_speeds(scenario)[: log.steps]
    d = log.ego[:, :2] - expert[:, :2]
    lat = -np.sin(expert[:, 2]) * d[:, 0] + np.cos(expert[:, 2]) * d[:, 1]
    lon_vel = float(np.mean(np.abs(log.ego[:, 3] - v_exp)))
    stop = None
    if v_exp[-1] < STOPPED_SPEED:
        stop = float(np.hypot(*(log.ego[-1, :2] - expert[-1, :2])))
    return lon_vel, stop, float(np.mean(np.abs(lat)))


def oscillation(points) -> float:
    """Sum of swings across the start-to-end chord, counted where the side flips."""
    pts = np.asarray(points, dtype=np.float64)
    e = [signed_lateral_offset(p, pts[0], pts[-1]) for p in pts]
    total = 0.0
    for a, b in zip(e[:-1], e[1:]):
        if a * b < 0:
            total += abs(b - a)
    return float(total)


def dynamics_metrics(log: SimLog):
    """``(max_jerk, max_accel, max_steer_rate, oscillation)``; all None under 4 steps."""
    if log.steps < 4:
        return None, None, None, None
    start = np.array([[log.start.x, log.start.y, log.start.yaw]])
    track = np.vstack([start, log.ego[:, :3]])
    p, dt = track[:, :2], log.dt
    acc = (p[2:] - 2 * p[1:-1] + p[:-2]) / dt ** 2
    jerk = (p[3:] - 3 * p[2:-1] + 3 * p[1:-2] - p[:-3]) / dt ** 3
    steer = np.abs(wrap(np.diff(track[:, 2]))) / dt
    return (float(np.linalg.norm(jerk, axis=1).max()), float(np.linalg.norm(acc, axis=1).max()),
            float(steer.max()), float(oscillation(p)))


def goal_metric(log: SimLog, scenario: Scenario) -> float:
    goal = scenario.expert_world()[-1, :2]
    return float(np.hypot(*(log.ego[-1, :2] - goal)))


def compute_metrics(log: SimLog, scenario: Scenario) -> MetricsReport:
    coll, off, gap, ttc = traffic_rule_metrics(log, scenario)
    lon, stop, lat = human_similarity_metrics(log, scenario)
    jerk, acc, steer, osc = dynamics_metrics(log)
    return MetricsReport(coll, off, gap, ttc, lon, stop, lat, jerk, acc, steer, osc,
                         goal_metric(log, scenario))


def aggregate(reports) -> MetricsReport:
    """Per-field mean over the reports that have a value."""
    out = {}
    for f in METRIC_FIELDS:
        vals = [getattr(r, f) for r in reports if getattr(r, f) is not None]
        out[f] = float(np.mean(vals)) if vals else None
    return MetricsReport(**out)


def evaluate(scenarios, planner: Planner, layout: GridLayout = None, threads: int = 1):
    """Closed-loop run plus metrics for each scenario.

    Returns ``(reports, aggregate_report, logs)`` in input order.
    """
    if not scenarios:
        raise BBoxPlanError("evaluate needs at least one scenario")
    layout = layout or GridLayout()

    def one(sc):
        try:
            log = run_closed_loop(sc, planner, layout)
        except BBoxPlanError as exc:
            raise BBoxPlanError(f"scenario {sc.id}: {exc}") from exc
        return compute_metrics(log, sc), log

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, scenarios))
    else:
        results = [one(sc) for sc in scenarios]
    reports = [r for r, _ in results]
    return reports, aggregate(reports), [lg for _, lg in results]


def _fmt(v):
    if v is None:
        return "NA"
    return repr(float(v))


def write_metrics_csv(path, scenarios, reports, agg: MetricsReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scenario_id",) + METRIC_FIELDS)
        for sc, r in zip(scenarios, reports):
            w.writerow([sc.id] + [_fmt(getattr(r, f)) for f in METRIC_FIELDS])
        w.writerow(["mean"] + [_fmt(getattr(agg, f)) for f in METRIC_FIELDS])


def read_metrics_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append({k: (rec[k] if k == "scenario_id" else
                             (None if rec[k] == "NA" else float(rec[k]))) for k in rec})
    return rows


def write_logs(path, logs, scenarios):
    with open(path, "w", encoding="utf-8") as fh:
        for lg, sc in zip(logs, scenarios):
            fh.write(json.dumps(lg.to_record(sc), separators=(",", ":")))
            fh.write("\n")
