"""End-to-end gradient self-check of the planner and loss against finite differences."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .composite import GridLayout, scenario_detections
from .domain import Agent, EgoState, MapElement, Scenario, validate_scenario
from .objective import LossWeights, agent_future_in_ego, expert_in_ego, total_loss
from .planner import PlannerConfig, build_element_batch, forward, init_params

TOLERANCE = 1e-4
FD_EPS = 1e-4

TINY_CONFIG = PlannerConfig(d_model=16, gnn_layers=3, heads=1, attn_out=8, head_hidden=16,
                            t_past=4, T_future=4)


def tiny_scenario(seed: int = 0, t_past: int = 4, T_future: int = 4) -> Scenario:
    """Two moving agents, a short lane and a short sidewalk around an ego driving along +x."""
    rng = np.random.default_rng(seed)
    dt, n = 0.5, t_past + T_future
    v = 5.0
    ego = [(v * dt * (i - t_past + 1), 0.0, 0.0) for i in range(n)]
    history = tuple(EgoState(x, y, yaw, v) for x, y, yaw in ego[:t_past])
    future = tuple(ego[t_past:])
    agents = []
    for k, (x0, y0, vx) in enumerate(((12.0, 3.5, -2.0), (-9.0, -3.0, 4.0))):
        x0 += rng.uniform(-1, 1)
        track = tuple((x0 + vx * dt * i, y0, 0.0 if vx > 0 else -np.pi, abs(vx))
                      for i in range(n))
        agents.append(Agent(k, 0.5 + 0.5 * k, track))
    road_map = (
        MapElement("lane", ((-1.3, 0.4), (3.1, 0.4)), 1.75),
        MapElement("sidewalk", ((0.0, 5.0), (3.0, 5.5))),
    )
    sc = Scenario("gradcheck", dt, t_past, T_future, road_map, tuple(agents), (), history, future)
    layout = GridLayout()
    sc = Scenario(sc.id, dt, t_past, T_future, road_map, sc.agents,
                  scenario_detections(sc, layout), history, future)
    return validate_scenario(sc, layout.size)


@dataclass
class GradcheckResult:
    max_error: float
    worst: str
    errors: dict

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def run_gradcheck(seed: int = 0, fault: str = None, cfg: PlannerConfig = TINY_CONFIG,
                  weights: LossWeights = LossWeights()) -> GradcheckResult:
    """Compares backprop gradients of every parameter with central differences.

    ``fault`` names a numerics op whose backward rule is corrupted for the
    duration of the check.
    """
    sc = tiny_scenario(seed, cfg.t_past, cfg.T_future)
    elements = build_element_batch(sc, cfg)
    expert, agents = expert_in_ego(sc), agent_future_in_ego(sc)
    params = init_params(cfg, seed)
    # the zero-initialised output layer would hide every upstream gradient
    rng = np.random.default_rng(seed)
    w2 = params["head_w2"].value
    params["head_w2"].value = rng.uniform(-0.3, 0.3, w2.shape) / np.sqrt(w2.shape[0])

    def loss():
        out = forward(elements, params, cfg)
        return total_loss(out.pred, expert, sc, weights, agents).total

    ctx = nm.corrupted_backward(fault) if fault else contextlib.nullcontext()
    with ctx:
        nm.zero_grad(params.values())
        nm.backward(loss())
    errors = {}
    for name, p in params.items():
        num = nm.numerical_grad(lambda: float(loss().value[0]), p.value, FD_EPS)
        errors[name] = relative_error(p.grad, num)
    worst = max(errors, key=errors.get)
    return GradcheckResult(errors[worst], worst, errors)
