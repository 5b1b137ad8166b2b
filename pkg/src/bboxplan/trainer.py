"""Imitation-learning loop: split, batch, optimize, checkpoint, report."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nm
from .errors import ContractError, TrainingError, ValidationError
from .objective import LossWeights, agent_future_in_ego, expert_in_ego, total_loss
from .planner import PlannerConfig, build_element_batch, forward, init_params, save_checkpoint

log = logging.getLogger(__name__)

REPORT_HEADER = ("epoch", "train_loss", "val_loss", "l1", "comfort", "safety", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    learning_rate: float = 5e-5
    split_ratio: float = 0.8
    checkpoint: Optional[str] = None
    checkpoint_every: int = 0
    log_every: int = 1
    record_time: bool = False

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ValidationError("split_ratio", "must lie strictly between 0 and 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size", "must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs", "must be >= 0")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate", "must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ValidationError(k, "unknown training option")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    l1: float
    comfort: float
    safety: float
    seconds: float


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: float = math.inf

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in REPORT_HEADER[1:]])


class _Prepared:
    """Loss inputs that do not depend on the parameters, computed once per scenario."""

    __slots__ = ("scenario", "elements", "expert", "agents")

    def __init__(self, scenario, cfg):
        self.scenario = scenario
        self.elements = build_element_batch(scenario, cfg)
        self.expert = expert_in_ego(scenario)
        self.agents = agent_future_in_ego(scenario)


def prepare(scenarios, cfg: PlannerConfig) -> list:
    return [_Prepared(s, cfg) for s in scenarios]


def split_dataset(scenarios, ratio: float = 0.8, seed: int = 0):
    """Seeded shuffle, then the first ``ceil(ratio * N)`` go to training."""
    n = len(scenarios)
    if n < 2:
        raise ContractError(f"need at least 2 scenarios to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    k = min(max(math.ceil(ratio * n - 1e-9), 1), n - 1)
    return [scenarios[i] for i in perm[:k]], [scenarios[i] for i in perm[k:]]


def scenario_loss(item: _Prepared, params, cfg: PlannerConfig, weights: LossWeights):
    out = forward(item.elements, params, cfg)
    return out, total_loss(out.pred, item.expert, item.scenario, weights, item.agents)


def _check_finite(terms, scenario_id):
    if not np.isfinite(terms.total.value).all():
        raise TrainingError(f"non-finite loss on scenario {scenario_id}")


def train_step(params, batch, cfg: PlannerConfig, weights: LossWeights, adam: nm.AdamState):
    """Mean gradient over ``batch`` and one Adam update; returns per-scenario losses."""
    nm.zero_grad(params.values())
    losses = []
    for item in batch:
        _, terms = scenario_loss(item, params, cfg, weights)
        _check_finite(terms, item.scenario.id)
        nm.backward(nm.scale(terms.total, 1.0 / len(batch)))
        losses.append(float(terms.total.value[0]))
    new = nm.adam_step(adam, {k: p.value for k, p in params.items()},
                       {k: p.grad for k, p in params.items()})
    for k, v in new.items():
        params[k].value = v
    return losses


def train_epoch(params, train_set, cfg: PlannerConfig, tcfg: TrainConfig, weights: LossWeights,
                adam: nm.AdamState, epoch: int = 0):
    """One pass over seeded-shuffled batches; returns ``(params, mean loss)``."""
    if not train_set:
        raise ContractError("train_epoch needs a non-empty training set")
    order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(train_set))
    losses = np.empty(len(order))
    for lo in range(0, len(order), tcfg.batch_size):
        idx = order[lo:lo + tcfg.batch_size]
        losses[idx] = train_step(params, [train_set[i] for i in idx], cfg, weights, adam)
    # averaged in dataset order so the value does not depend on the shuffle
    return params, float(np.mean(losses))


def evaluate_loss(params, items, cfg: PlannerConfig, weights: LossWeights):
    """Forward-only mean of total loss and its three components."""
    acc = np.zeros(4)
    for item in items:
        _, t = scenario_loss(item, params, cfg, weights)
        _check_finite(t, item.scenario.id)
        acc += (float(t.total.value[0]), t.l1, t.comfort, t.safety)
    return tuple(acc / max(len(items), 1))


def fit(scenarios, cfg: PlannerConfig, tcfg: TrainConfig, weights: LossWeights = LossWeights(),
        params=None, init_seed: Optional[int] = None):
    """Split, train for ``tcfg.epochs`` and keep the best-validation checkpoint.

    Returns ``(params, report)`` where ``params`` are the best-validation
    weights (the initial weights when ``epochs == 0``).
    """
    train, val = split_dataset(list(scenarios), tcfg.split_ratio, tcfg.seed)
    train_items, val_items = prepare(train, cfg), prepare(val, cfg)
    if params is None:
        params = init_params(cfg, tcfg.seed if init_seed is None else init_seed)
    adam = nm.AdamState(lr=tcfg.learning_rate)
    report = TrainReport()
    best = {k: p.value.copy() for k, p in params.items()}
    ckpt = Path(tcfg.checkpoint) if tcfg.checkpoint else None
    if ckpt is not None:
        save_checkpoint(ckpt, params, cfg, {"epoch": 0})
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        params, train_loss = train_epoch(params, train_items, cfg, tcfg, weights, adam, epoch)
        val_loss, l1, comfort, safety = evaluate_loss(params, val_items, cfg, weights)
        seconds = time.perf_counter() - t0 if tcfg.record_time else 0.0
        report.rows.append(EpochRow(epoch, train_loss, val_loss, l1, comfort, safety, seconds))
        if tcfg.log_every and epoch % tcfg.log_every == 0:
            log.info("epoch %d train %.4f val %.4f (l1 %.4f)", epoch, train_loss, val_loss, l1)
        if val_loss < report.best_val_loss:
            report.best_val_loss, report.best_epoch = val_loss, epoch
            best = {k: p.value.copy() for k, p in params.items()}
            if ckpt is not None:
                save_checkpoint(ckpt, params, cfg, {"epoch": epoch, "val_loss": val_loss})
        if ckpt is not None and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            save_checkpoint(ckpt.with_name(f"{ckpt.name}.epoch{epoch:04d}"), params, cfg,
                            {"epoch": epoch, "val_loss": val_loss})
    for k, v in best.items():
        params[k].value = v
    return params, report


def overfit(scenario, cfg: PlannerConfig, weights: LossWeights = LossWeights(),
            max_steps: int = 500, target_l1: float = 0.1, learning_rate: float = 1e-4, seed: int = 0):
    """Fit a single scenario until its waypoint L1 drops below ``target_l1``.

    The waypoint L1 is ``mean_t(|dx| + |dy|)`` in meters.  Returns
    ``(params, steps_taken, l1_history)``; the returned params are the ones
    whose error was last measured.
    """
    item = _Prepared(scenario, cfg)
    params = init_params(cfg, seed)
    adam = nm.AdamState(lr=learning_rate)
    history = []
    for step in range(max_steps + 1):
        nm.zero_grad(params.values())
        out, terms = scenario_loss(item, params, cfg, weights)
        _check_finite(terms, scenario.id)
        err = float(np.abs(out.pred.value[:, :2] - item.expert[:, :2]).sum(axis=1).mean())
        history.append(err)
        if err < target_l1 or step == max_steps:
            return params, step, history
        nm.backward(terms.total)
        new = nm.adam_step(adam, {k: p.value for k, p in params.items()},
                           {k: p.grad for k, p in params.items()})
        for k, v in new.items():
            params[k].value = v
