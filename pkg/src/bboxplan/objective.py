"""Training objective: L1 imitation plus comfort and safety hinge penalties.

All functions take the predicted trajectory as a :class:`~bboxplan.numerics.Node`
of shape ``[T, 3]`` (ego frame, meters and radians) so the loss can be
back-propagated into the planner.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nm
from .domain import Scenario
from .errors import ContractError, ValidationError
from .geometry import to_ego_frame

EGO_RADIUS = 1.5


@dataclass(frozen=True)
class LossWeights:
    comfort: float = 0.1
    safety: float = 0.1
    yaw_weight: float = 1.0
    safe_margin: float = 1.0
    a_max: float = 3.0
    j_max: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValidationError(f.name, "must be non-negative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ValidationError(k, "unknown loss option")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class LossTerms:
    total: nm.Node
    l1: float
    comfort: float
    safety: float


def expert_in_ego(scenario: Scenario) -> np.ndarray:
    """Expert future as a ``[T, 3]`` array in the current ego frame."""
    return to_ego_frame(scenario.ego, scenario.expert_world())


def agent_future_in_ego(scenario: Scenario):
    """Agent positions over the future horizon in the ego frame: ``([K, T, 2], radii[K])``."""
    T, start = scenario.T_future, scenario.t_past
    xy, radii = [], []
    for a in scenario.agents:
        track = a.array()
        if len(track) < start + T:
            continue
        xy.append(to_ego_frame(scenario.ego, track[start:start + T, :2]))
        radii.append(a.radius)
    if not xy:
        return np.zeros((0, T, 2)), np.zeros(0)
    return np.stack(xy), np.array(radii)


def _as_pred(pred):
    if isinstance(pred, nm.Node):
        return pred
    return nm.constant(getattr(pred, "waypoints", pred))


def imitation_l1(pred, expert, w: LossWeights = LossWeights()) -> nm.Node:
    """Mean over waypoints of ``|dx| + |dy| + yaw_weight * |wrap(dyaw)|``."""
    pred = _as_pred(pred)
    expert = np.asarray(getattr(expert, "waypoints", expert), dtype=np.float64)
    if pred.shape != expert.shape:
        raise ContractError(f"horizon mismatch: prediction {pred.shape} vs expert {expert.shape}")
    T = pred.shape[0]
    diff = nm.sub(pred, expert)
    xy = nm.sum_all(nm.absolute(nm.take(diff, (slice(None), slice(0, 2)))))
    yaw = nm.sum_all(nm.absolute(nm.wrap_angle(nm.take(diff, (slice(None), 2)))))
    return nm.scale(nm.add(xy, nm.scale(yaw, w.yaw_weight)), 1.0 / T)


def difference_matrix(T: int, order: int) -> np.ndarray:
    """Rows apply the forward finite difference of the given order."""
    coeffs = {2: (1.0, -2.0, 1.0), 3: (-1.0, 3.0, -3.0, 1.0)}[order]
    D = np.zeros((T - order, T))
    for i in range(T - order):
        D[i, i:i + order + 1] = coeffs
    return D


def _hinge_sq_mean(x: nm.Node, limit: float) -> nm.Node:
    h = nm.relu(nm.sub(nm.absolute(x), np.array([limit])))
    return nm.mean_all(nm.mul(h, h))


def comfort_loss(pred, dt: float, w: LossWeights = LossWeights()) -> nm.Node:
    """Squared hinge on per-axis finite-difference acceleration and jerk."""
    pred = _as_pred(pred)
    T = pred.shape[0]
    if T < 4:
        raise ContractError(f"comfort_loss needs at least 4 waypoints, got {T}")
    xy = nm.take(pred, (slice(None), slice(0, 2)))
    acc = nm.scale(nm.matmul(difference_matrix(T, 2), xy), 1.0 / dt ** 2)
    jerk = nm.scale(nm.matmul(difference_matrix(T, 3), xy), 1.0 / dt ** 3)
    return nm.add(_hinge_sq_mean(acc, w.a_max), _hinge_sq_mean(jerk, w.j_max))


def safety_loss(pred, scenario: Scenario, w: LossWeights = LossWeights(), agents=None) -> nm.Node:
    """Mean squared violation of the clearance margin between ego and agent discs."""
    pred = _as_pred(pred)
    xy_agents, radii = agents if agents is not None else agent_future_in_ego(scenario)
    K, T = xy_agents.shape[0], pred.shape[0]
    if K == 0:
        return nm.constant(np.zeros(1))
    rows = np.tile(np.arange(T), K)
    ego_xy = nm.take(pred, (rows, slice(0, 2)))
    centre = nm.norm_rows(nm.sub(ego_xy, xy_agents.reshape(K * T, 2)))
    clearance = nm.sub(centre, np.repeat(radii + EGO_RADIUS, T))
    h = nm.relu(nm.sub(np.array([w.safe_margin]), clearance))
    return nm.mean_all(nm.mul(h, h))


def total_loss(pred, expert, scenario: Scenario, w: LossWeights = LossWeights(),
               agents=None) -> LossTerms:
    l1 = imitation_l1(pred, expert, w)
    comfort = comfort_loss(pred, scenario.dt, w)
    safety = safety_loss(pred, scenario, w, agents)
    total = nm.add(nm.add(l1, nm.scale(comfort, w.comfort)), nm.scale(safety, w.safety))
    return LossTerms(total, float(l1.value[0]), float(comfort.value[0]), float(safety.value[0]))
