import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bboxplan import synth
from bboxplan.domain import (EgoState, PlannedTrajectory, dumps_scenario, load_scenarios,
                             save_scenarios, scenario_to_record, validate_scenario)
from bboxplan.errors import GeometryError, ParseError, ValidationError
from bboxplan.geometry import (from_ego_frame, interpolate_polyline, point_to_polyline_distance,
                               signed_lateral_offset, to_ego_frame, wrap)

coords = st.floats(-1e3, 1e3, allow_nan=False)
angles = st.floats(-math.pi, math.pi, exclude_max=True)


# ---------------------------------------------------------------- frames

def test_identity_origin():
    p = np.array([[3.0, -2.0, 0.7], [1.0, 1.0, -3.0]])
    np.testing.assert_array_equal(to_ego_frame((0.0, 0.0, 0.0), p), p)


def test_quarter_turn_rotation():
    out = to_ego_frame(EgoState(0.0, 0.0, math.pi / 2, 0.0), (1.0, 0.0))
    np.testing.assert_allclose(out, [0.0, -1.0], atol=1e-15)


@given(coords, coords, angles, st.lists(st.tuples(coords, coords, angles), min_size=1, max_size=5))
def test_round_trip(ox, oy, oyaw, pts):
    p = np.array(pts)
    back = from_ego_frame((ox, oy, oyaw), to_ego_frame((ox, oy, oyaw), p))
    np.testing.assert_allclose(back[:, :2], p[:, :2], atol=1e-12 * max(1.0, np.abs(p).max()) * 10)
    assert np.all(np.abs(wrap(back[:, 2] - p[:, 2])) < 1e-12)


@given(coords, coords, angles)
def test_own_pose_maps_to_zero(x, y, yaw):
    np.testing.assert_allclose(to_ego_frame((x, y, yaw), (x, y, yaw)), 0.0, atol=1e-12)


@given(st.floats(-50, 50))
def test_wrap_range(a):
    w = wrap(a)
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


# ---------------------------------------------------------------- polylines

def test_interpolate_segment():
    out = interpolate_polyline([(0, 0), (10, 0)], 2.0)
    np.testing.assert_allclose(out[:, 0], [0, 2, 4, 6, 8, 10])
    np.testing.assert_allclose(out[:, 1], 0.0)


def test_interpolate_large_spacing_keeps_endpoints():
    out = interpolate_polyline([(0, 0), (3, 4)], 7.5)
    np.testing.assert_allclose(out, [[0, 0], [3, 4]])


def test_interpolate_l_shape_keeps_corner():
    out = interpolate_polyline([(0, 0), (2, 0), (2, 2)], 1.0)
    np.testing.assert_allclose(out, [[0, 0], [1, 0], [2, 0], [2, 1], [2, 2]])


def test_interpolate_errors():
    with pytest.raises(GeometryError):
        interpolate_polyline([(1, 1), (1, 1)], 1.0)
    with pytest.raises(GeometryError):
        interpolate_polyline([(0, 0), (1, 0)], 0.0)
    with pytest.raises(GeometryError):
        interpolate_polyline([(0, 0)], 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=6),
       st.floats(0.1, 20.0))
def test_interpolate_gaps_bounded(pts, spacing):
    p = np.array(pts)
    if np.any(np.all(np.diff(p, axis=0) == 0, axis=1)) or np.linalg.norm(np.diff(p, axis=0), axis=1).sum() < 1e-6:
        return
    out = interpolate_polyline(p, spacing)
    gaps = np.linalg.norm(np.diff(out, axis=0), axis=1)
    assert np.all(gaps <= spacing + 1e-9)
    np.testing.assert_allclose(out[0], p[0])
    np.testing.assert_allclose(out[-1], p[-1], atol=1e-9)


def test_point_to_polyline_distance_and_offset():
    assert point_to_polyline_distance((5, 3), [(0, 0), (10, 0)]) == pytest.approx(3.0)
    assert point_to_polyline_distance((-4, 3), [(0, 0), (10, 0)]) == pytest.approx(5.0)
    assert signed_lateral_offset((1, 2), (0, 0), (4, 0)) == pytest.approx(2.0)
    assert signed_lateral_offset((1, -2), (0, 0), (4, 0)) == pytest.approx(-2.0)


def test_planned_trajectory_wraps_yaw():
    tr = PlannedTrajectory(np.array([[0.0, 0.0, 3 * math.pi]]), 0.5)
    assert tr.waypoints[0, 2] == pytest.approx(-math.pi)
    with pytest.raises(Exception):
        PlannedTrajectory(np.zeros((3, 2)), 0.5)


# ---------------------------------------------------------------- files

def test_round_trip_file(tmp_path):
    scs = [synth.generate_scenario(k, s) for k in synth.KINDS for s in (0, 1)]
    path = tmp_path / "s.jsonl"
    save_scenarios(scs, path)
    back = load_scenarios(path)
    assert back == scs
    assert [dumps_scenario(s) for s in back] == path.read_text().splitlines()


def test_record_field_order():
    rec = scenario_to_record(synth.generate_scenario("crosswalk", 0))
    assert list(rec) == ["id", "dt", "t_past", "T_future", "map", "agents", "detections",
                         "ego_history", "ego_future"]
    assert list(rec["agents"][0]) == ["id", "radius", "track"]


def test_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert load_scenarios(p) == []


def _corrupt(tmp_path, mutate):
    rec = scenario_to_record(synth.generate_scenario("straight", 3))
    mutate(rec)
    p = tmp_path / "bad.jsonl"
    good = dumps_scenario(synth.generate_scenario("straight", 4))
    p.write_text(good + "\n" + json.dumps(rec) + "\n")
    return p


def test_zero_width_names_field(tmp_path):
    def m(rec):
        det = rec["detections"][0]
        i = next(i for i, f in enumerate(det["frames"]) if f is not None)
        det["frames"][i][2] = 0
    with pytest.raises(ValidationError) as err:
        load_scenarios(_corrupt(tmp_path, m))
    assert err.value.field == "w"
    assert err.value.line == 2


@pytest.mark.parametrize("field,mutate", [
    ("ego_future", lambda r: r["ego_future"].pop()),
    ("frames", lambda r: r["detections"][0]["frames"].pop()),
    ("yaw", lambda r: r["ego_history"][0].__setitem__(2, 4.0)),
    ("kind", lambda r: r["map"][0].__setitem__("kind", "river")),
    ("radius", lambda r: r["agents"][0].__setitem__("radius", -1)),
    ("class_id", lambda r: r["detections"][0].__setitem__("class_id", 12)),
    ("id", lambda r: r.pop("id")),
])
def test_invariant_violations_name_field(tmp_path, field, mutate):
    with pytest.raises(ValidationError) as err:
        load_scenarios(_corrupt(tmp_path, mutate))
    assert err.value.field == field


def test_malformed_json_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(dumps_scenario(synth.generate_scenario("straight", 0)) + "\n\n{oops\n")
    with pytest.raises(ParseError) as err:
        load_scenarios(p)
    assert err.value.line == 3


# ---------------------------------------------------------------- generator

@settings(max_examples=25, deadline=None)
@given(st.sampled_from(synth.KINDS), st.integers(0, 10_000))
def test_generated_scenarios_are_valid(kind, seed):
    sc = synth.generate_scenario(kind, seed)
    validate_scenario(sc)
    assert len(sc.ego_history) == sc.t_past and len(sc.ego_future) == sc.T_future
    assert all(len(d.frames) == sc.t_past for d in sc.detections)


@pytest.mark.parametrize("kind", synth.KINDS)
def test_generator_is_deterministic(kind):
    a, b = synth.generate_scenario(kind, 11), synth.generate_scenario(kind, 11)
    assert dumps_scenario(a) == dumps_scenario(b)
    assert dumps_scenario(a) != dumps_scenario(synth.generate_scenario(kind, 12))


def _speed_consistent(xy, v, dt):
    disp = np.linalg.norm(np.diff(xy, axis=0), axis=1) / dt
    ref = np.maximum(v, 1.0)
    return np.all(np.abs(disp - v) <= 0.05 * ref)


@pytest.mark.parametrize("kind", synth.KINDS)
@pytest.mark.parametrize("seed", range(5))
def test_kinematic_consistency(kind, seed):
    sc = synth.generate_scenario(kind, seed)
    hist = np.array([[e.x, e.y, e.v] for e in sc.ego_history])
    assert _speed_consistent(hist[:, :2], hist[1:, 2], sc.dt)
    expert = np.vstack([hist[-1:, :2], sc.expert_world()[:, :2]])
    disp = np.linalg.norm(np.diff(expert, axis=0), axis=1) / sc.dt
    # expert speed never jumps by more than 5% of the current speed between frames
    assert abs(disp[0] - hist[-1, 2]) <= 0.05 * hist[-1, 2] + 0.5
    for a in sc.agents:
        tr = a.array()
        # average speed over a tick lies between its endpoint speeds
        lo = np.minimum(tr[:-1, 3], tr[1:, 3])
        hi = np.maximum(tr[:-1, 3], tr[1:, 3])
        d = np.linalg.norm(np.diff(tr[:, :2], axis=0), axis=1) / sc.dt
        assert np.all(d >= lo - 0.05 * np.maximum(lo, 1.0))
        assert np.all(d <= hi + 0.05 * np.maximum(hi, 1.0))


@pytest.mark.parametrize("seed", range(10))
def test_straight_expert_on_lane_centerline(seed):
    sc = synth.generate_scenario("straight", seed)
    lanes = [m for m in sc.map if m.kind == "lane"]
    for x, y, _ in sc.expert_world():
        assert min(point_to_polyline_distance((x, y), m.points) for m in lanes) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_lead_brake_speed_non_increasing(seed):
    sc = synth.generate_scenario("lead_brake", seed)
    lead = sc.agents[0].array()
    assert np.all(np.diff(lead[:, 3]) <= 0)
    assert lead[-1, 3] < lead[0, 3]


def test_generate_mixed_cycles_kinds():
    scs = synth.generate_mixed(6, seed=5)
    assert [s.id for s in scs] == ["straight-5", "lead_brake-6", "crosswalk-7", "lane_change-8",
                                   "straight-9", "lead_brake-10"]
