import csv
import functools
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from bboxplan import cli, gradcheck
from bboxplan.domain import load_scenarios
from bboxplan.plot import Viewport, viewport_for, read_logs
from bboxplan.planner import PlannerConfig

SMALL_PLANNER = {"d_model": 16, "heads": 1, "attn_out": 8, "head_hidden": 16}
MICRO = PlannerConfig(d_model=8, gnn_layers=1, heads=1, attn_out=4, head_hidden=8,
                      t_past=4, T_future=4)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "s.jsonl"
    assert run("gen", "--kind", "mixed", "--count", 5, "--seed", 2, "--out", path) == 0
    return path


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 1, "planner": SMALL_PLANNER,
                                "train": {"epochs": 2, "learning_rate": 1e-3, "batch_size": 2}}))
    return path


@pytest.fixture
def micro_gradcheck(monkeypatch):
    monkeypatch.setattr(gradcheck, "run_gradcheck",
                        functools.partial(gradcheck.run_gradcheck, cfg=MICRO))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- gen

def test_gen_writes_count(data, capsys):
    assert len(load_scenarios(data)) == 5


def test_gen_zero_count(tmp_path):
    out = tmp_path / "e.jsonl"
    assert run("gen", "--count", 0, "--out", out) == 0
    assert out.read_text() == ""


def test_gen_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert run("gen", "--kind", "crosswalk", "--count", 3, "--seed", 9, "--out", p) == 0
    assert a.read_bytes() == b.read_bytes()


def test_unknown_kind_is_usage_error(tmp_path):
    assert run("gen", "--kind", "roundabout", "--out", tmp_path / "x") == 2


# ---------------------------------------------------------------- train

def test_train_zero_epochs(tmp_path, data, config):
    out = tmp_path / "run"
    assert run("train", "--config", config, "--data", data, "--out", out, "--epochs", 0) == 0
    assert read_csv(out / "train_report.csv") == [["epoch", "train_loss", "val_loss", "l1",
                                                    "comfort", "safety", "seconds"]]
    assert (out / "model.ckpt").exists()
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["train"]["epochs"] == 0 and resolved["planner"]["d_model"] == 16


def test_train_is_deterministic(tmp_path, data, config):
    for name in ("a", "b"):
        assert run("train", "--config", config, "--data", data, "--out", tmp_path / name) == 0
    ra = (tmp_path / "a" / "train_report.csv").read_bytes()
    assert ra == (tmp_path / "b" / "train_report.csv").read_bytes()
    assert len(ra.decode().splitlines()) == 3
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


@pytest.mark.parametrize("bad", [{"trainer": {}}, {"train": {"momentum": 0.9}},
                                 {"planner": {"width": 3}}, {"layout": {"cell": 200},
                                                             "planner": {"pixel_scale": 639.0}},
                                 {"seed": "x"}])
def test_train_bad_config_exit_2(tmp_path, data, bad, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(bad))
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "o") == 2
    assert "error" in capsys.readouterr().err


def test_train_malformed_config_exit_2(tmp_path, data):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{\n  \"seed\": 1,,\n}")
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "o") == 2


def test_train_horizon_mismatch_exit_2(tmp_path, data, capsys):
    cfg = tmp_path / "h.json"
    cfg.write_text(json.dumps({"planner": dict(SMALL_PLANNER, T_future=8)}))
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "o") == 2
    assert "T_future" in capsys.readouterr().err


def test_train_divergence_exit_3(tmp_path, data, config, monkeypatch):
    from bboxplan import trainer
    from bboxplan.errors import TrainingError

    def boom(*a, **k):
        raise TrainingError("non-finite loss on scenario x")

    monkeypatch.setattr(trainer, "fit", boom)
    assert run("train", "--config", config, "--data", data, "--out", tmp_path / "o") == 3


# ---------------------------------------------------------------- eval

def test_eval_oracle_expert(tmp_path, data, capsys):
    report = tmp_path / "m.csv"
    assert run("eval", "--oracle-expert", "--data", data, "--report", report) == 0
    rows = read_csv(report)
    header = rows[0]
    assert len(rows) == 1 + 5 + 1 and rows[-1][0] == "mean"
    col = {h: i for i, h in enumerate(header)}
    for name in ("collision_rate", "lat_pos_err", "lon_vel_err", "progress_l2"):
        vals = [float(r[col[name]]) for r in rows[1:-1]]
        assert max(vals) <= 1e-9
    for i, name in enumerate(header[1:], 1):
        vals = [float(r[i]) for r in rows[1:-1] if r[i] != "NA"]
        if vals:
            assert float(rows[-1][i]) == pytest.approx(np.mean(vals), rel=1e-12, abs=1e-15)
    printed = capsys.readouterr().out.splitlines()
    assert printed[0] == ",".join(header) and printed[1].startswith("mean,")
    logs = read_logs(tmp_path / "m.simlog.jsonl")
    assert len(logs) == 5


def test_eval_trained_checkpoint(tmp_path, data, config):
    assert run("train", "--config", config, "--data", data, "--out", tmp_path / "r") == 0
    ck = tmp_path / "r" / "model.ckpt"
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for rep in (a, b):
        assert run("eval", "--checkpoint", ck, "--config", config, "--data", data,
                   "--report", rep) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(read_csv(a)) == 7


def test_eval_shape_mismatch_exit_2(tmp_path, data, config, capsys):
    assert run("train", "--config", config, "--data", data, "--out", tmp_path / "r",
               "--epochs", 0) == 0
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"planner": {"d_model": 32, "heads": 1}}))
    code = run("eval", "--checkpoint", tmp_path / "r" / "model.ckpt", "--config", other,
               "--data", data, "--report", tmp_path / "m.csv")
    assert code == 2
    assert "configuration expects" in capsys.readouterr().err


def test_eval_empty_data_exit_2(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert run("eval", "--oracle-expert", "--data", empty, "--report", tmp_path / "m.csv") == 2


def test_eval_missing_checkpoint_exit_2(tmp_path, data):
    assert run("eval", "--data", data, "--report", tmp_path / "m.csv") == 2
    assert run("eval", "--checkpoint", tmp_path / "nope.ckpt", "--data", data,
               "--report", tmp_path / "m.csv") == 2


def test_threads_must_be_positive(tmp_path, data):
    assert run("--threads", 0, "eval", "--oracle-expert", "--data", data,
               "--report", tmp_path / "m.csv") == 2


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_passes_and_repeats(micro_gradcheck, capsys):
    assert run("gradcheck", "--seed", 0) == 0
    first = capsys.readouterr().out
    assert run("gradcheck", "--seed", 0) == 0
    assert capsys.readouterr().out == first
    assert first.startswith("max relative error")


def test_gradcheck_fault_fails(micro_gradcheck, capsys):
    assert run("gradcheck", "--fault", "matmul") == 1
    assert "FAIL" in capsys.readouterr().err


# ---------------------------------------------------------------- plot

@pytest.fixture
def simlog(tmp_path, data):
    assert run("eval", "--oracle-expert", "--data", data, "--report", tmp_path / "m.csv") == 0
    return tmp_path / "m.simlog.jsonl"


def _points(el):
    return np.array([[float(v) for v in p.split(",")] for p in el.get("points").split()])


def test_plot_outputs(tmp_path, simlog):
    svg = tmp_path / "p.svg"
    assert run("plot", "--log", simlog, "--out", svg) == 0
    record = read_logs(simlog)[0]
    rows = read_csv(tmp_path / "p.csv")
    assert rows[0] == ["step", "x", "y", "yaw", "v"]
    assert len(rows) - 1 == len(record["ego"])
    root = ET.parse(svg).getroot()
    ns = {"s": "http://www.w3.org/2000/svg"}
    ego = root.find(".//s:polyline[@id='ego']", ns)
    vp = viewport_for(record)
    expect = vp.apply(np.vstack([record["start"][:2], np.asarray(record["ego"])[:, :2]]))
    # coordinates are written with three decimals
    assert np.abs(_points(ego) - expect).max() <= 5e-4
    assert len(root.findall(".//s:polyline[@class='map']", ns)) == len(record["map"])


def test_plot_selects_scenario(tmp_path, simlog):
    second = read_logs(simlog)[1]["scenario_id"]
    assert run("plot", "--log", simlog, "--out", tmp_path / "p.svg", "--scenario", second) == 0
    assert second in (tmp_path / "p.svg").read_text()
    assert run("plot", "--log", simlog, "--out", tmp_path / "q.svg", "--scenario", "nope") == 2


def test_plot_missing_log_exit_2(tmp_path):
    assert run("plot", "--log", tmp_path / "none.jsonl", "--out", tmp_path / "p.svg") == 2


def test_plot_corrupt_log_exit_2(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json}\n")
    assert run("plot", "--log", bad, "--out", tmp_path / "p.svg") == 2


def test_viewport_flips_y():
    vp = Viewport(0.0, 0.0, 2.0, 800.0)
    np.testing.assert_allclose(vp.apply([[0.0, 0.0], [10.0, 5.0]]), [[20, 780], [40, 770]])
