"""Static overhead rendering of closed-loop logs: SVG plus an ego-track CSV."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from xml.sax.saxutils import quoteattr

import numpy as np

from .errors import ParseError
from .simeval import SimLog

CANVAS_PX = 800
MARGIN_PX = 20
EGO_TRACK_HEADER = ("step", "x", "y", "yaw", "v")

_MAP_STYLE = {
    "road": "#bbbbbb", "lane": "#888888", "sidewalk": "#c8b48c",
    "crosswalk": "#4a7fd0", "traffic_signal": "#d04a4a",
}


@dataclass(frozen=True)
class Viewport:
    """World-to-pixel affine map; the y axis is flipped so north points up."""

    x0: float
    y0: float
    scale: float
    height: float

    def apply(self, xy):
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return np.column_stack([(xy[:, 0] - self.x0) * self.scale + MARGIN_PX,
                                self.height - ((xy[:, 1] - self.y0) * self.scale + MARGIN_PX)])


def read_logs(path):
    """Log records (dicts) from a JSONL file written by the eval command."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad log record: {exc.msg}", n) from None
    return out


def viewport_for(record) -> Viewport:
    pts = [np.asarray(record["ego"])[:, :2], np.asarray(record["start"][:2]).reshape(1, 2)]
    pts += [np.asarray(p)[:, :2] for p in record["plans"]]
    agents = np.asarray(record["agents"])
    if agents.size:
        pts.append(agents[..., :2].reshape(-1, 2))
    allp = np.vstack(pts)
    lo, hi = allp.min(axis=0) - 5.0, allp.max(axis=0) + 5.0
    span = max(hi[0] - lo[0], hi[1] - lo[1], 1.0)
    scale = (CANVAS_PX - 2 * MARGIN_PX) / span
    return Viewport(float(lo[0]), float(lo[1]), float(scale), float(CANVAS_PX))


def _polyline(xy, color, width, extra=""):
    pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in xy)
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{extra}/>')


def render_svg(record) -> str:
    vp = viewport_for(record)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_PX}" '
             f'height="{CANVAS_PX}" viewBox="0 0 {CANVAS_PX} {CANVAS_PX}">',
             f"<title>{record['scenario_id']}</title>",
             '<rect width="100%" height="100%" fill="white"/>']
    for m in record.get("map", []):
        parts.append(_polyline(vp.apply(m["points"]), _MAP_STYLE.get(m["kind"], "#999999"), 2,
                               f' class="map" data-kind={quoteattr(m["kind"])}'))
    agents = np.asarray(record["agents"])
    for j in range(agents.shape[1] if agents.ndim == 3 else 0):
        parts.append(_polyline(vp.apply(agents[:, j, :2]), "#e08a00", 1.5, ' class="agent"'))
    for p in record["plans"]:
        parts.append(_polyline(vp.apply(np.asarray(p)[:, :2]), "#5fbf5f", 0.75,
                               ' class="plan" opacity="0.5"'))
    ego = np.vstack([np.asarray(record["start"][:2]), np.asarray(record["ego"])[:, :2]])
    parts.append(_polyline(vp.apply(ego), "#1f3fbf", 2.5, ' id="ego"'))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_ego_csv(record, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EGO_TRACK_HEADER)
        for k, row in enumerate(record["ego"]):
            w.writerow([k] + [repr(float(v)) for v in row])


def plot_log(record, svg_path, csv_path):
    SimLog.from_record(record)  # shape check before writing anything
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(render_svg(record))
    write_ego_csv(record, csv_path)
