"""Scenario data types and the line-delimited JSON scenario file.

A scenario file holds one JSON object per line.  Keys appear in the fixed
order ``id, dt, t_past, T_future, map, agents, detections, ego_history,
ego_future``.  Angles are radians, distances meters, detection frames pixels
in the composite camera grid.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import wrap

MAP_KINDS = ("road", "sidewalk", "crosswalk", "lane", "traffic_signal")
NUM_CLASSES = 10
# Detector classes in the order barrier, bicycle, bus, car, construction
# vehicle, motorcycle, pedestrian, traffic cone, trailer, truck.
CAR = 3
PEDESTRIAN = 6
# Composite frame side (3 cells of 213 px); see composite.DEFAULT_CELL.
COMPOSITE_SIZE = 3 * 213


@dataclass(frozen=True)
class BBoxFeature:
    class_id: int
    x_tl: float
    y_tl: float
    w: float
    h: float

    def as_row(self):
        return (self.class_id, self.x_tl, self.y_tl, self.w, self.h)


@dataclass(frozen=True)
class TrackedObject:
    """One tracked detection; ``frames[i]`` is ``(x, y, w, h)`` or None when unseen."""

    track_id: int
    class_id: int
    frames: tuple

    def feature(self, i) -> Optional[BBoxFeature]:
        f = self.frames[i]
        return None if f is None else BBoxFeature(self.class_id, *f)


@dataclass(frozen=True)
class MapElement:
    kind: str
    points: tuple
    half_width: Optional[float] = None

    def array(self):
        return np.asarray(self.points, dtype=np.float64)


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    yaw: float
    v: float

    def pose(self):
        return (self.x, self.y, self.yaw)


@dataclass(frozen=True)
class Agent:
    """World-frame replay track; rows are ``(x, y, yaw, v)`` per frame."""

    id: int
    radius: float
    track: tuple

    def array(self):
        return np.asarray(self.track, dtype=np.float64)


@dataclass(frozen=True)
class PlannedTrajectory:
    """``T`` waypoints ``(x, y, yaw)`` in the ego frame at planning time."""

    waypoints: np.ndarray
    dt: float

    def __post_init__(self):
        w = np.array(self.waypoints, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != 3:
            raise ValidationError("waypoints", f"expected T x 3, got {w.shape}")
        w[:, 2] = wrap(w[:, 2])
        object.__setattr__(self, "waypoints", w)

    def __len__(self):
        return len(self.waypoints)


@dataclass(frozen=True)
class Scenario:
    id: str
    dt: float
    t_past: int
    T_future: int
    map: tuple
    agents: tuple
    detections: tuple
    ego_history: tuple
    ego_future: tuple

    @property
    def ego(self) -> EgoState:
        """Current ego state (last history sample)."""
        return self.ego_history[-1]

    def expert_world(self) -> np.ndarray:
        return np.asarray(self.ego_future, dtype=np.float64).reshape(-1, 3)

    def agent_class(self, agent_id: int) -> int:
        """Detector class of an agent: taken from its track, else guessed from size."""
        for d in self.detections:
            if d.track_id == agent_id:
                return d.class_id
        for a in self.agents:
            if a.id == agent_id:
                return PEDESTRIAN if a.radius < 0.75 else CAR
        raise KeyError(agent_id)


# ---------------------------------------------------------------- validation

def validate_scenario(sc: Scenario, composite_size: float = COMPOSITE_SIZE, line=None):
    def fail(field, msg):
        raise ValidationError(field, msg, line)

    if not sc.dt > 0:
        fail("dt", "must be positive")
    if sc.t_past < 1:
        fail("t_past", "must be >= 1")
    if sc.T_future < 1:
        fail("T_future", "must be >= 1")
    if len(sc.ego_history) != sc.t_past:
        fail("ego_history", f"length {len(sc.ego_history)} != t_past {sc.t_past}")
    if len(sc.ego_future) != sc.T_future:
        fail("ego_future", f"length {len(sc.ego_future)} != T_future {sc.T_future}")
    for e in sc.ego_history:
        if not -math.pi <= e.yaw < math.pi:
            fail("yaw", f"{e.yaw} not wrapped to [-pi, pi)")
        if e.v < 0:
            fail("v", f"negative speed {e.v}")
    for row in sc.ego_future:
        if not -math.pi <= row[2] < math.pi:
            fail("yaw", f"{row[2]} not wrapped to [-pi, pi)")
    for m in sc.map:
        if m.kind not in MAP_KINDS:
            fail("kind", f"unknown map kind {m.kind!r}")
        if len(m.points) < 2:
            fail("points", "map element needs >= 2 points")
        pts = m.array()
        if np.any(np.all(np.diff(pts, axis=0) == 0, axis=1)):
            fail("points", "consecutive map points coincide")
        if m.half_width is not None and not m.half_width > 0:
            fail("half_width", "must be positive")
    for a in sc.agents:
        if not a.radius > 0:
            fail("radius", "must be positive")
        if len(a.track) < sc.t_past:
            fail("track", f"agent {a.id} shorter than t_past")
    seen = set()
    for d in sc.detections:
        if d.track_id in seen:
            fail("track_id", f"duplicate track id {d.track_id}")
        seen.add(d.track_id)
        if not 0 <= d.class_id < NUM_CLASSES:
            fail("class_id", f"{d.class_id} outside [0, {NUM_CLASSES - 1}]")
        if len(d.frames) != sc.t_past:
            fail("frames", f"track {d.track_id} has {len(d.frames)} frames, expected {sc.t_past}")
        if all(f is None for f in d.frames):
            fail("frames", f"track {d.track_id} is never observed")
        for f in d.frames:
            if f is None:
                continue
            x, y, w, h = f
            if not w > 0:
                fail("w", f"non-positive width {w}")
            if not h > 0:
                fail("h", f"non-positive height {h}")
            if x < 0 or x + w > composite_size:
                fail("x_tl", f"bbox x-range [{x}, {x + w}] leaves the composite frame")
            if y < 0 or y + h > composite_size:
                fail("y_tl", f"bbox y-range [{y}, {y + h}] leaves the composite frame")
    return sc


# ---------------------------------------------------------------- (de)serialization

def scenario_to_record(sc: Scenario) -> dict:
    return {
        "id": sc.id,
        "dt": sc.dt,
        "t_past": sc.t_past,
        "T_future": sc.T_future,
        "map": [_map_record(m) for m in sc.map],
        "agents": [
            {"id": a.id, "radius": a.radius, "track": [list(r) for r in a.track]}
            for a in sc.agents
        ],
        "detections": [
            {"track_id": d.track_id, "class_id": d.class_id,
             "frames": [None if f is None else list(f) for f in d.frames]}
            for d in sc.detections
        ],
        "ego_history": [[e.x, e.y, e.yaw, e.v] for e in sc.ego_history],
        "ego_future": [list(r) for r in sc.ego_future],
    }


def _map_record(m: MapElement) -> dict:
    rec = {"kind": m.kind}
    if m.half_width is not None:
        rec["half_width"] = m.half_width
    rec["points"] = [list(p) for p in m.points]
    return rec


def _floats(seq, n, field):
    if not isinstance(seq, (list, tuple)) or len(seq) != n:
        raise ValidationError(field, f"expected {n} numbers, got {seq!r}")
    try:
        return tuple(float(v) for v in seq)
    except (TypeError, ValueError):
        raise ValidationError(field, f"non-numeric entry in {seq!r}") from None


def scenario_from_record(rec: dict, line=None, composite_size: float = COMPOSITE_SIZE) -> Scenario:
    try:
        maps = tuple(
            MapElement(
                kind=str(m["kind"]),
                points=tuple(_floats(p, 2, "points") for p in m["points"]),
                half_width=None if m.get("half_width") is None else float(m["half_width"]),
            )
            for m in rec["map"]
        )
        agents = tuple(
            Agent(
                id=int(a["id"]),
                radius=float(a["radius"]),
                track=tuple(_floats(r, 4, "track") for r in a["track"]),
            )
            for a in rec["agents"]
        )
        dets = tuple(
            TrackedObject(
                track_id=int(d["track_id"]),
                class_id=int(d["class_id"]),
                frames=tuple(None if f is None else _floats(f, 4, "frames") for f in d["frames"]),
            )
            for d in rec["detections"]
        )
        hist = tuple(EgoState(*_floats(e, 4, "ego_history")) for e in rec["ego_history"])
        fut = tuple(_floats(r, 3, "ego_future") for r in rec["ego_future"])
        sc = Scenario(
            id=str(rec["id"]), dt=float(rec["dt"]), t_past=int(rec["t_past"]),
            T_future=int(rec["T_future"]), map=maps, agents=agents, detections=dets,
            ego_history=hist, ego_future=fut,
        )
    except KeyError as exc:
        raise ValidationError(str(exc.args[0]), "missing field", line) from None
    except ValidationError as exc:
        raise ValidationError(exc.field, str(exc).split(": ", 1)[-1], line) from None
    except (TypeError, AttributeError) as exc:
        raise ParseError(f"malformed record: {exc}", line) from None
    return validate_scenario(sc, composite_size, line)


def dumps_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_record(sc), separators=(",", ":"), allow_nan=False)


def save_scenarios(scenarios: Sequence[Scenario], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sc in scenarios:
            fh.write(dumps_scenario(sc))
            fh.write("\n")


def load_scenarios(path, composite_size: float = COMPOSITE_SIZE) -> list:
    out = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("record is not an object", lineno)
        out.append(scenario_from_record(rec, lineno, composite_size))
    return out
