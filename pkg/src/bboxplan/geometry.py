"""Planar frame changes, polyline resampling and point-to-polyline distance."""
from __future__ import annotations

import math

import numpy as np

from .errors import GeometryError


def wrap(angle):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    a = np.asarray(angle, dtype=np.float64)
    inside = (a >= -np.pi) & (a < np.pi)
    out = np.where(inside, a, np.mod(a + np.pi, 2.0 * np.pi) - np.pi)
    # mod can round up to exactly +pi
    out = np.where(out >= np.pi, -np.pi, out)
    return float(out) if np.ndim(out) == 0 else out


def to_ego_frame(origin, p):
    """Express world point(s) or pose(s) ``p`` in the frame of pose ``origin``.

    ``origin`` is anything with ``x, y, yaw`` (or a 3-sequence).  ``p`` may be
    a single ``(x, y)`` / ``(x, y, yaw)`` or an array of them; extra columns
    beyond yaw are passed through unchanged.
    """
    ox, oy, oyaw = _pose(origin)
    arr = np.array(p, dtype=np.float64)
    c, s = math.cos(oyaw), math.sin(oyaw)
    dx = arr[..., 0] - ox
    dy = arr[..., 1] - oy
    out = arr.copy()
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    if arr.shape[-1] >= 3:
        out[..., 2] = wrap(arr[..., 2] - oyaw)
    return out


def from_ego_frame(origin, p):
    """Inverse of :func:`to_ego_frame`."""
    ox, oy, oyaw = _pose(origin)
    arr = np.array(p, dtype=np.float64)
    c, s = math.cos(oyaw), math.sin(oyaw)
    out = arr.copy()
    out[..., 0] = c * arr[..., 0] - s * arr[..., 1] + ox
    out[..., 1] = s * arr[..., 0] + c * arr[..., 1] + oy
    if arr.shape[-1] >= 3:
        out[..., 2] = wrap(arr[..., 2] + oyaw)
    return out


def _pose(origin):
    if hasattr(origin, "yaw"):
        return float(origin.x), float(origin.y), float(origin.yaw)
    x, y, yaw = origin[:3]
    return float(x), float(y), float(yaw)


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def interpolate_polyline(points, spacing: float) -> np.ndarray:
    """Resample a polyline at uniform arc-length ``spacing``.

    Returns ``floor(L / spacing) + 1`` samples starting at the first vertex,
    with the last vertex appended when it does not fall on the grid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if spacing <= 0:
        raise GeometryError(f"spacing must be positive, got {spacing}")
    if pts.ndim != 2 or len(pts) < 2:
        raise GeometryError("a polyline needs at least two points")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        raise GeometryError("zero-length polyline")
    n = int(math.floor(total / spacing + 1e-12))
    s = np.arange(n + 1) * spacing
    tol = 1e-10
    if total - s[-1] > tol:
        s = np.append(s, total)
    else:
        s[-1] = total
    x = np.interp(s, cum, pts[:, 0])
    y = np.interp(s, cum, pts[:, 1])
    return np.stack([x, y], axis=1)


def point_to_polyline_distance(point, points) -> float:
    """Shortest Euclidean distance from ``point`` to a polyline's segments."""
    p = np.asarray(point, dtype=np.float64)[:2]
    pts = np.asarray(points, dtype=np.float64)
    a, b = pts[:-1], pts[1:]
    ab = b - a
    denom = (ab ** 2).sum(axis=1)
    t = np.where(denom > 0, ((p - a) * ab).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return float(np.sqrt(((closest - p) ** 2).sum(axis=1)).min())


def signed_lateral_offset(point, start, end) -> float:
    """Signed distance of ``point`` from the line through ``start``→``end`` (left positive)."""
    sx, sy = start[0], start[1]
    dx, dy = end[0] - sx, end[1] - sy
    n = math.hypot(dx, dy)
    if n == 0:
        return 0.0
    return ((point[0] - sx) * (-dy) + (point[1] - sy) * dx) / n
