"""Synthetic data, training, closed-loop evaluation and plots for the bbox planner.

Subcommands: gen, train, eval, gradcheck, plot.

Exit codes: 0 success, 1 check failure, 2 usage or validation error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import gradcheck, plot, simeval, synth, trainer
from .composite import DEFAULT_CELL, GridLayout
from .domain import load_scenarios, save_scenarios
from .errors import BBoxPlanError, TrainingError, ValidationError
from .objective import LossWeights
from .planner import PlannerConfig, load_checkpoint

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("bboxplan")


class UsageError(BBoxPlanError):
    pass


@dataclass(frozen=True)
class RunConfig:
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    cell: int = DEFAULT_CELL
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    report_dir: Optional[str] = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValidationError("config", "top level must be an object")
        known = {"planner", "train", "loss", "layout", "paths", "seed"}
        for k in d:
            if k not in known:
                raise ValidationError(k, "unknown config section")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ValidationError("seed", "must be an integer")
        layout = dict(d.get("layout", {}))
        cell = layout.pop("cell", DEFAULT_CELL)
        if layout:
            raise ValidationError(sorted(layout)[0], "unknown layout option")
        if not isinstance(cell, int) or cell <= 0:
            raise ValidationError("cell", "must be a positive integer")
        pdict = dict(d.get("planner", {}))
        pdict.setdefault("pixel_scale", float(3 * cell))
        planner = _build(PlannerConfig, pdict, "planner")
        if planner.pixel_scale != 3 * cell:
            raise ValidationError("pixel_scale", f"must equal the composite size {3 * cell}")
        tdict = dict(d.get("train", {}))
        tdict.setdefault("seed", seed)
        paths = dict(d.get("paths", {}))
        bad = set(paths) - {"data", "checkpoint", "report_dir"}
        if bad:
            raise ValidationError(sorted(bad)[0], "unknown path option")
        return cls(planner, _build(trainer.TrainConfig, tdict, "train"),
                   _build(LossWeights, d.get("loss", {}), "loss"), cell,
                   paths.get("data"), paths.get("checkpoint"), paths.get("report_dir"), seed)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError("config", f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "layout": {"cell": self.cell},
            "planner": self.planner.to_dict(),
            "train": self.train.to_dict(),
            "loss": self.loss.to_dict(),
            "paths": {"data": self.data, "checkpoint": self.checkpoint,
                      "report_dir": self.report_dir},
        }


def _build(cls, d, section):
    if not isinstance(d, dict):
        raise ValidationError(section, "must be an object")
    try:
        return cls.from_dict(d)
    except TypeError as exc:
        raise ValidationError(section, str(exc)) from None


def _check_horizons(scenarios, cfg: PlannerConfig):
    for sc in scenarios:
        if sc.t_past != cfg.t_past or sc.T_future != cfg.T_future:
            raise ValidationError(
                "T_future" if sc.T_future != cfg.T_future else "t_past",
                f"scenario {sc.id} has t_past={sc.t_past}, T_future={sc.T_future}; planner "
                f"expects {cfg.t_past}, {cfg.T_future}")


def _load_data(path, layout):
    if path is None:
        raise UsageError("no scenario file given (--data or paths.data)")
    scenarios = load_scenarios(path, layout.size)
    if not scenarios:
        raise UsageError(f"{path}: no scenarios")
    return scenarios


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    layout = GridLayout(args.cell)
    if args.kind == "mixed":
        scenarios = synth.generate_mixed(args.count, args.seed, layout=layout)
    else:
        scenarios = [synth.generate_scenario(args.kind, args.seed + i, layout)
                     for i in range(args.count)]
    save_scenarios(scenarios, args.out)
    print(len(scenarios))
    return EXIT_OK


def cmd_train(args) -> int:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    if args.epochs is not None:
        rc = replace(rc, train=replace(rc.train, epochs=args.epochs))
    if args.timing:
        rc = replace(rc, train=replace(rc.train, record_time=True))
    layout = GridLayout(rc.cell)
    out = Path(args.out or rc.report_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    scenarios = _load_data(args.data or rc.data, layout)
    _check_horizons(scenarios, rc.planner)
    ckpt = out / "model.ckpt"
    tcfg = replace(rc.train, checkpoint=str(ckpt))
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(rc.to_dict(), fh, indent=2, sort_keys=True)
    t0 = time.perf_counter()
    _, report = trainer.fit(scenarios, rc.planner, tcfg, rc.loss)
    report.write_csv(out / "train_report.csv")
    best = report.best_epoch if report.best_epoch is not None else 0
    print(f"trained {len(report.rows)} epochs in {time.perf_counter() - t0:.1f}s; "
          f"best epoch {best}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = None
    cell = DEFAULT_CELL
    if args.config:
        rc = RunConfig.load(args.config)
        expected, cell = rc.planner, rc.cell
    layout = GridLayout(cell)
    scenarios = _load_data(args.data, layout)
    if args.oracle_expert:
        planner = simeval.expert_planner
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --oracle-expert is given")
        params, cfg, _ = load_checkpoint(args.checkpoint, expected)
        _check_horizons(scenarios, cfg)
        planner = simeval.model_planner(params, cfg)
    reports, agg, logs = simeval.evaluate(scenarios, planner, layout, threads=args.threads)
    simeval.write_metrics_csv(args.report, scenarios, reports, agg)
    log_path = args.logs or str(Path(args.report).with_suffix(".simlog.jsonl"))
    simeval.write_logs(log_path, logs, scenarios)
    print(",".join(("scenario_id",) + simeval.METRIC_FIELDS))
    print(",".join(["mean"] + [simeval._fmt(getattr(agg, f)) for f in simeval.METRIC_FIELDS]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    res = gradcheck.run_gradcheck(args.seed, fault=args.fault)
    print(f"max relative error {res.max_error:.3e} ({res.worst})")
    log.info("gradcheck took %.1fs", time.perf_counter() - t0)
    if not res.passed:
        print(f"FAIL: {res.worst} exceeds {gradcheck.TOLERANCE:g}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_plot(args) -> int:
    if not os.path.exists(args.log):
        raise UsageError(f"{args.log}: no such log")
    records = plot.read_logs(args.log)
    if args.scenario is not None:
        records = [r for r in records if r["scenario_id"] == args.scenario]
    if not records:
        raise UsageError(f"{args.log}: no matching log record")
    svg = Path(args.out)
    plot.plot_log(records[0], svg, svg.with_suffix(".csv"))
    print(f"wrote {svg} and {svg.with_suffix('.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bboxplan", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic scenarios as JSONL")
    g.add_argument("--kind", choices=synth.KINDS + ("mixed",), default="straight")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cell", type=int, default=DEFAULT_CELL, help="camera cell size in px")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit the planner, write checkpoint and report")
    t.add_argument("--config", help="JSON run configuration")
    t.add_argument("--data", help="scenario JSONL (overrides paths.data)")
    t.add_argument("--out", help="output directory (overrides paths.report_dir)")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--timing", action="store_true", help="record wall time per epoch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation to a metrics CSV")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="metrics CSV path")
    e.add_argument("--logs", help="SimLog JSONL path (default: next to the report)")
    e.add_argument("--config", help="run configuration the checkpoint must match")
    e.add_argument("--oracle-expert", action="store_true",
                   help="replay the expert instead of a trained planner")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--fault", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="render a SimLog as SVG plus ego-track CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True, help="SVG path; the CSV goes next to it")
    p.add_argument("--scenario", help="scenario id inside the log (default: first)")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (BBoxPlanError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
