"""3x3 composite camera grid and a synthetic bounding-box projector.

Eight surround cameras tile a 3x3 grid of ``S x S`` cells with the centre
left blank.  Side cameras are turned a quarter turn towards the vehicle body
and the rear row is flipped upside down, so that image position in the
composite roughly matches direction around the ego vehicle.

The projector is a stand-in for a real detector: it turns a disc-shaped
agent into a square box whose horizontal position encodes bearing and whose
size and vertical position encode range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .domain import EgoState, TrackedObject
from .errors import GeometryError
from .geometry import to_ego_frame

DEFAULT_CELL = 213
FOCAL_PX_M = 150.0
MAX_RANGE_M = 80.0
MIN_BOX_PX = 4.0
SECTOR = math.pi / 4

ROTATIONS = ("none", "ccw90", "cw90", "inv180")

# Counter-clockwise from straight ahead; sector k covers bearings
# [k*45 - 22.5, k*45 + 22.5) degrees.
CAMERAS_BY_SECTOR = (
    "front", "front_left", "left", "rear_left",
    "rear", "rear_right", "right", "front_right",
)

_ASSIGNMENT = {
    "front_left": (0, 0), "front": (0, 1), "front_right": (0, 2),
    "left": (1, 0), "right": (1, 2),
    "rear_left": (2, 0), "rear": (2, 1), "rear_right": (2, 2),
}


def _default_rotation():
    rot = {}
    for cam, (row, col) in _ASSIGNMENT.items():
        if row == 0:
            rot[cam] = "none"
        elif row == 2:
            rot[cam] = "inv180"
        else:
            rot[cam] = "ccw90" if col == 0 else "cw90"
    return rot


@dataclass(frozen=True)
class GridLayout:
    S: int = DEFAULT_CELL
    assignment: dict = field(default_factory=lambda: dict(_ASSIGNMENT))
    rotation: dict = field(default_factory=_default_rotation)

    @property
    def size(self) -> int:
        return 3 * self.S

    def cell_origin(self, camera):
        row, col = self.assignment[camera]
        return col * self.S, row * self.S

    def validate(self):
        cells = sorted(self.assignment.values())
        expected = sorted((r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1))
        if len(self.assignment) != 8 or cells != expected:
            raise GeometryError("layout must use every cell except the centre exactly once")
        for cam, (row, col) in self.assignment.items():
            want = "none" if row == 0 else "inv180" if row == 2 else ("ccw90" if col == 0 else "cw90")
            if self.rotation.get(cam) != want:
                raise GeometryError(f"camera {cam} at ({row},{col}) must use rotation {want}")
        return self


@dataclass(frozen=True)
class CameraBBox:
    camera: str
    x_tl: float
    y_tl: float
    w: float
    h: float


def _check_in_frame(b, S):
    x, y, w, h = b
    if not (w > 0 and h > 0):
        raise GeometryError(f"bbox {b} has non-positive extent")
    if x < 0 or y < 0 or x + w > S or y + h > S:
        raise GeometryError(f"bbox {b} leaves the {S}x{S} frame")


def rotate_bbox(b, rotation: str, S: int):
    """Rotate bbox ``(x, y, w, h)`` with the image it lives in.

    Pixel maps: ccw90 ``(u, v) -> (v, S-1-u)``, cw90 ``(u, v) -> (S-1-v, u)``,
    inv180 ``(u, v) -> (S-1-u, S-1-v)``.
    """
    _check_in_frame(b, S)
    x, y, w, h = b
    if rotation == "none":
        return (x, y, w, h)
    if rotation == "ccw90":
        return (y, S - x - w, h, w)
    if rotation == "cw90":
        return (S - y - h, x, h, w)
    if rotation == "inv180":
        return (S - x - w, S - y - h, w, h)
    raise GeometryError(f"unknown rotation {rotation!r}")


def to_composite(layout: GridLayout, cb: CameraBBox):
    """Place a per-camera box into composite pixel coordinates."""
    x, y, w, h = rotate_bbox((cb.x_tl, cb.y_tl, cb.w, cb.h), layout.rotation[cb.camera], layout.S)
    ox, oy = layout.cell_origin(cb.camera)
    return (x + ox, y + oy, w, h)


def apparent_size(d: float, radius: float, S: int) -> float:
    """Side of the square box for a disc of ``radius`` at distance ``d``, before frame clipping."""
    return min(max(FOCAL_PX_M * 2 * radius / d, MIN_BOX_PX), S)


def project_agent(ego: EgoState, pose, radius: float, layout: GridLayout) -> Optional[CameraBBox]:
    """Synthetic detection of a disc agent at world ``pose`` seen from ``ego``."""
    S = layout.S
    px, py = to_ego_frame(ego, (pose[0], pose[1]))
    d = math.hypot(px, py)
    if d == 0:
        raise GeometryError("agent coincides with the ego position")
    if d > MAX_RANGE_M:
        return None
    theta = math.atan2(py, px)
    k = int(math.floor((theta + SECTOR / 2) / SECTOR)) % 8
    local = theta - k * SECTOR
    local = (local + math.pi) % (2 * math.pi) - math.pi
    u_c = S * (local + SECTOR / 2) / SECTOR
    size = apparent_size(d, radius, S)
    v_c = S * (0.5 + min(max(0.8 / d, 0.0), 0.45))
    x0, y0 = u_c - size / 2, v_c - size / 2
    x1, y1 = x0 + size, y0 + size
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    x1, y1 = min(x1, float(S)), min(y1, float(S))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return CameraBBox(CAMERAS_BY_SECTOR[k], x0, y0, x1 - x0, y1 - y0)


def detect_agents(agents, ego_poses, frame_indices, layout: GridLayout, class_of) -> tuple:
    """Run the projector over a window of frames and build tracked objects.

    ``ego_poses[i]`` is the ego state at agent-track frame ``frame_indices[i]``;
    ``class_of(agent_id)`` supplies the detector class.  Agents never seen in
    the window produce no track.
    """
    tracks = []
    for agent in agents:
        rows = agent.track
        frames = []
        for ego, fi in zip(ego_poses, frame_indices):
            cb = None
            if 0 <= fi < len(rows):
                x, y = rows[fi][0], rows[fi][1]
                # an agent on top of the ego has no bearing; treat it as unseen
                if (x, y) != (ego.x, ego.y):
                    cb = project_agent(ego, (x, y), agent.radius, layout)
            frames.append(None if cb is None else tuple(float(v) for v in to_composite(layout, cb)))
        if any(f is not None for f in frames):
            tracks.append(TrackedObject(agent.id, class_of(agent.id), tuple(frames)))
    return tuple(tracks)


def scenario_detections(scenario, layout: GridLayout = None, class_of=None) -> tuple:
    """Detections for a scenario's history window from its own agent tracks."""
    layout = layout or GridLayout()
    class_of = class_of or scenario.agent_class
    return detect_agents(scenario.agents, scenario.ego_history, range(scenario.t_past),
                         layout, class_of)


__all__ = [
    "GridLayout", "CameraBBox", "apparent_size", "rotate_bbox", "to_composite", "project_agent",
    "detect_agents", "scenario_detections", "ROTATIONS", "CAMERAS_BY_SECTOR", "DEFAULT_CELL",
]
