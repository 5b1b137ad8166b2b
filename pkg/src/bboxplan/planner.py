"""Dual-embedding trajectory planner.

Each input element (ego history, one tracked box, one map polyline) becomes a
small point set.  Points pass through a shared MLP plus a sinusoidal position
code, a fully connected GNN whose edge weights are a learned soft adjacency,
and a summation readout that yields one descriptor per element.  An attention
layer with the ego descriptor as query fuses all descriptors, and an MLP head
regresses ``T`` future waypoints ``(x, y, yaw)`` in the ego frame.
"""
from __future__ import annotations

import functools
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nm
from .domain import COMPOSITE_SIZE, MAP_KINDS, NUM_CLASSES, PlannedTrajectory, Scenario
from .errors import CheckpointError, ContractError, ValidationError
from .geometry import interpolate_polyline, to_ego_frame

ELEMENT_KINDS = ("ego", "agent") + tuple(
    {"traffic_signal": "map_signal"}.get(k, "map_" + k) for k in MAP_KINDS
)

SPEED_SCALE = 20.0


@dataclass(frozen=True)
class PlannerConfig:
    d_model: int = 256
    gnn_layers: int = 3
    heads: int = 4
    attn_out: int = 128
    head_hidden: int = 256
    t_past: int = 4
    T_future: int = 16
    feature_width: int = 5
    coord_scale: float = 50.0
    pixel_scale: float = float(COMPOSITE_SIZE)
    map_spacing: float = 2.0
    ego_in_keys: bool = True

    def __post_init__(self):
        for f in ("d_model", "gnn_layers", "heads", "attn_out", "head_hidden",
                  "t_past", "T_future", "feature_width"):
            if getattr(self, f) <= 0:
                raise ValidationError(f, "must be positive")
        if self.d_model % self.heads:
            raise ValidationError("heads", f"d_model {self.d_model} not divisible by {self.heads}")
        if self.feature_width != 5:
            raise ValidationError("feature_width", "point features are 5 wide")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown planner option")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def param_shapes(cfg: PlannerConfig) -> "OrderedDict[str, tuple]":
    d = cfg.d_model
    shapes = OrderedDict()
    shapes["in_w1"] = (cfg.feature_width, d)
    shapes["in_b1"] = (d,)
    shapes["in_w2"] = (d, d)
    shapes["in_b2"] = (d,)
    for layer in range(cfg.gnn_layers):
        for part in ("wq", "wk", "wv", "wu"):
            shapes[f"gnn{layer}_{part}"] = (d, d)
    shapes["attn_wq"] = (d, d)
    shapes["attn_wk"] = (d, d)
    shapes["attn_wv"] = (d, d)
    shapes["attn_wo"] = (d, cfg.attn_out)
    shapes["type_emb"] = (len(ELEMENT_KINDS), d)
    shapes["head_w1"] = (cfg.attn_out, cfg.head_hidden)
    shapes["head_b1"] = (cfg.head_hidden,)
    shapes["head_w2"] = (cfg.head_hidden, cfg.T_future * 3)
    shapes["head_b2"] = (cfg.T_future * 3,)
    return shapes


def init_params(cfg: PlannerConfig, seed: int = 0) -> "OrderedDict[str, nm.Node]":
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases.

    The last head layer starts at zero so the untrained planner stands still
    instead of emitting jerky random waypoints.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1 or name == "head_w2":
            value = np.zeros(shape)
        else:
            # the type table feeds a d_model-wide key, so it shares that fan-in
            fan_in = cfg.d_model if name == "type_emb" else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = nm.leaf(value, name=name)
    return params


# ---------------------------------------------------------------- input encoding

@dataclass
class Element:
    kind: str
    rows: np.ndarray   # [n, 5]
    mask: np.ndarray   # [n] bool


@functools.lru_cache(maxsize=4096)
def _resampled(points: tuple, spacing: float) -> np.ndarray:
    out = interpolate_polyline(points, spacing)
    out.setflags(write=False)
    return out


def build_element_batch(scenario: Scenario, cfg: PlannerConfig) -> list:
    """Ego element first, then one per tracked object, then one per map polyline."""
    origin = scenario.ego
    hist = np.array([[e.x, e.y, e.yaw, e.v] for e in scenario.ego_history])
    local = to_ego_frame(origin, hist)
    ego_rows = np.zeros((len(hist), 5))
    ego_rows[:, 0] = local[:, 0] / cfg.coord_scale
    ego_rows[:, 1] = local[:, 1] / cfg.coord_scale
    ego_rows[:, 2] = local[:, 2] / math.pi
    ego_rows[:, 3] = local[:, 3] / SPEED_SCALE
    elements = [Element("ego", ego_rows, np.ones(len(hist), dtype=bool))]

    for det in scenario.detections:
        rows = np.zeros((len(det.frames), 5))
        mask = np.zeros(len(det.frames), dtype=bool)
        for i, f in enumerate(det.frames):
            if f is None:
                continue
            mask[i] = True
            rows[i, 0] = det.class_id / NUM_CLASSES
            rows[i, 1:] = np.asarray(f) / cfg.pixel_scale
        elements.append(Element("agent", rows, mask))

    for m in scenario.map:
        pts = to_ego_frame(origin, _resampled(m.points, cfg.map_spacing))
        rows = np.zeros((len(pts), 5))
        rows[:, :2] = pts / cfg.coord_scale
        kind = ELEMENT_KINDS[2 + MAP_KINDS.index(m.kind)]
        elements.append(Element(kind, rows, np.ones(len(pts), dtype=bool)))
    return elements


@functools.lru_cache(maxsize=64)
def sinusoidal_table(n: int, d: int) -> np.ndarray:
    """Rows ``[sin(p w_0), cos(p w_0), sin(p w_1), ...]`` with ``w_i = 10000^(-2i/d)``."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    table.setflags(write=False)
    return table


# ---------------------------------------------------------------- network

@dataclass
class Forward:
    """Everything a forward pass produced; ``pred`` carries gradients."""

    pred: nm.Node                       # [T, 3] meters / radians, yaw unwrapped
    descriptors: nm.Node                # [E, d]
    fused: nm.Node                      # [1, attn_out]
    kinds: list
    attention: list = field(default_factory=list)    # per head [1, E]
    adjacency: list = field(default_factory=list)    # per bucket, per layer [B, n, n]
    masks: list = field(default_factory=list)


def embed_points(rows: np.ndarray, mask: np.ndarray, params, cfg: PlannerConfig) -> nm.Node:
    """Shared MLP on [B, n, 5] rows, plus the position code, masked rows zeroed."""
    x = nm.constant(rows)
    h = nm.relu(nm.add_bias(nm.matmul(x, params["in_w1"]), params["in_b1"]))
    h = nm.add_bias(nm.matmul(h, params["in_w2"]), params["in_b2"])
    pe = np.broadcast_to(sinusoidal_table(rows.shape[-2], cfg.d_model), h.shape)
    h = nm.add(h, np.ascontiguousarray(pe))
    return nm.mask_rows(h, mask)


def local_gnn(h: nm.Node, mask: np.ndarray, params, cfg: PlannerConfig, adjacency=None) -> nm.Node:
    """Fully connected GNN over each element's nodes, then summation readout."""
    if not mask.any(axis=-1).all():
        raise ContractError("local_gnn: an element has no observed nodes")
    inv_sqrt_d = 1.0 / math.sqrt(cfg.d_model)
    col_mask = mask[..., None, :]
    for layer in range(cfg.gnn_layers):
        q = nm.matmul(h, params[f"gnn{layer}_wq"])
        k = nm.matmul(h, params[f"gnn{layer}_wk"])
        v = nm.matmul(h, params[f"gnn{layer}_wv"])
        a = nm.softmax_rows(nm.scale(nm.matmul(q, nm.transpose(k)), inv_sqrt_d), col_mask)
        if adjacency is not None:
            adjacency.append(a.value)
        msg = nm.matmul(nm.matmul(a, v), params[f"gnn{layer}_wu"])
        h = nm.add(h, nm.relu(msg))
    return nm.layer_norm(nm.sum_rows(nm.mask_rows(h, mask)))


def global_attention(desc: nm.Node, kinds, params, cfg: PlannerConfig, weights=None) -> nm.Node:
    """Ego-query multi-head attention over all element descriptors -> [1, attn_out]."""
    ego_idx = [i for i, k in enumerate(kinds) if k == "ego"]
    if len(ego_idx) != 1:
        raise ContractError(f"global_attention needs exactly one ego element, got {len(ego_idx)}")
    e = ego_idx[0]
    kind_idx = np.array([ELEMENT_KINDS.index(k) for k in kinds])
    keys_in = nm.add(desc, nm.take(params["type_emb"], kind_idx))
    q = nm.matmul(nm.take(desc, slice(e, e + 1)), params["attn_wq"])
    k = nm.matmul(keys_in, params["attn_wk"])
    v = nm.matmul(desc, params["attn_wv"])
    key_mask = np.ones((1, len(kinds)), dtype=bool)
    if not cfg.ego_in_keys:
        key_mask[0, e] = False
    dk = cfg.d_model // cfg.heads
    outs = []
    for hd in range(cfg.heads):
        cols = (slice(None), slice(hd * dk, (hd + 1) * dk))
        qh, kh, vh = nm.take(q, cols), nm.take(k, cols), nm.take(v, cols)
        logits = nm.scale(nm.matmul(qh, nm.transpose(kh)), 1.0 / math.sqrt(dk))
        a = nm.softmax_rows(logits, key_mask)
        if weights is not None:
            weights.append(a.value)
        outs.append(nm.matmul(a, vh))
    cat = outs[0] if len(outs) == 1 else nm.concat(outs, axis=1)
    return nm.matmul(cat, params["attn_wo"])


def trajectory_head(fused: nm.Node, params, cfg: PlannerConfig) -> nm.Node:
    """MLP to a [T, 3] waypoint matrix in meters and radians (yaw not yet wrapped)."""
    h = nm.relu(nm.add_bias(nm.matmul(fused, params["head_w1"]), params["head_b1"]))
    out = nm.add_bias(nm.matmul(h, params["head_w2"]), params["head_b2"])
    out = nm.reshape(out, (cfg.T_future, 3))
    scale = np.tile([cfg.coord_scale, cfg.coord_scale, math.pi], (cfg.T_future, 1))
    return nm.mul(out, scale)


def forward(elements, params, cfg: PlannerConfig) -> Forward:
    # elements with the same node count are encoded together
    buckets = OrderedDict()
    for i, el in enumerate(elements):
        buckets.setdefault(len(el.rows), []).append(i)
    order, parts, adjacency, masks = [], [], [], []
    for idx in buckets.values():
        rows = np.stack([elements[i].rows for i in idx])
        mask = np.stack([elements[i].mask for i in idx])
        h = embed_points(rows, mask, params, cfg)
        parts.append(local_gnn(h, mask, params, cfg, adjacency))
        masks.append(mask)
        order.extend(idx)
    desc = parts[0] if len(parts) == 1 else nm.concat(parts, axis=0)
    if order != sorted(order):
        desc = nm.take(desc, np.argsort(order))
    kinds = [el.kind for el in elements]
    weights = []
    fused = global_attention(desc, kinds, params, cfg, weights)
    pred = trajectory_head(fused, params, cfg)
    return Forward(pred, desc, fused, kinds, weights, adjacency, masks)


def plan(scenario: Scenario, params, cfg: PlannerConfig) -> PlannedTrajectory:
    out = forward(build_element_batch(scenario, cfg), params, cfg)
    return PlannedTrajectory(out.pred.value, scenario.dt)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"BBOXPLAN-CKPT 1\n"


def save_checkpoint(path, params, cfg: PlannerConfig, meta=None) -> None:
    """Header line of JSON (config + name/shape list), then little-endian float64 data."""
    entries = [{"name": n, "shape": list(p.value.shape)} for n, p in params.items()]
    header = {"config": cfg.to_dict(), "params": entries, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in params.values():
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path, expected: PlannerConfig = None):
    """Returns ``(params, config, meta)``; shapes are checked against ``expected``."""
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise CheckpointError(f"{path}: not a bboxplan checkpoint")
        try:
            header = json.loads(fh.readline().decode("utf-8"))
            cfg = PlannerConfig.from_dict(header["config"])
        except (ValueError, KeyError) as exc:
            raise CheckpointError(f"{path}: bad header ({exc})") from None
        blob = fh.read()
    want = param_shapes(expected or cfg)
    names = [e["name"] for e in header["params"]]
    if names != list(want):
        raise CheckpointError(f"{path}: parameter names do not match the configuration")
    params = OrderedDict()
    offset = 0
    for e in header["params"]:
        shape = tuple(e["shape"])
        if shape != want[e["name"]]:
            raise CheckpointError(
                f"{path}: parameter {e['name']} has shape {shape}, configuration expects "
                f"{want[e['name']]}")
        n = int(np.prod(shape)) * 8
        if offset + n > len(blob):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).reshape(shape)
        params[e["name"]] = nm.leaf(arr.astype(np.float64), name=e["name"])
        offset += n
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return params, expected or cfg, header.get("meta", {})
