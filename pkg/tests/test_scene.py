"""Scene transforms, sampling, and file ingestion."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fimp import scene as sc
from fimp.errors import SceneFormatError


def track(xy, mask=None, agent_id=0):
    xy = np.asarray(xy, dtype=float)
    if mask is None:
        mask = np.ones(len(xy), dtype=bool)
    return sc.AgentTrack(agent_id, xy, mask)


def straight_track(start, heading, speed, agent_id=0, steps=sc.T_TOTAL):
    d = np.array([math.cos(heading), math.sin(heading)])
    xy = start + np.arange(steps)[:, None] * speed * sc.DT * d
    return track(xy, agent_id=agent_id)


def simple_scene(tracks, lanes=(), av_index=0):
    return sc.SceneFrame("s", tuple(tracks), tuple(lanes), av_index)


def straight_lane(start=(0.0, 0.0), heading=0.0, spacing=1.0, **attrs):
    d = np.array([math.cos(heading), math.sin(heading)])
    pts = np.asarray(start) + np.arange(10)[:, None] * spacing * d
    return sc.LanePolyline(pts, **attrs)


class TestFrames:
    def test_own_position_maps_to_origin(self):
        p = sc.to_agent_frame(np.array([3.0, -2.0]), np.array([3.0, -2.0]), 1.1)
        np.testing.assert_allclose(p, [0.0, 0.0], atol=1e-12)

    def test_quarter_turn(self):
        p = sc.to_agent_frame(np.array([0.0, 1.0]), np.zeros(2), math.pi / 2)
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pt = rng.normal(size=2) * 100
            pos = rng.normal(size=2) * 100
            h = rng.uniform(-math.pi, math.pi)
            back = sc.from_agent_frame(sc.to_agent_frame(pt, pos, h), pos, h)
            np.testing.assert_allclose(back, pt, atol=1e-9)

    @given(st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_wrap_angle_range(self, theta):
        w = sc.wrap_angle(theta)
        assert -math.pi < w <= math.pi
        assert math.cos(w) == pytest.approx(math.cos(theta), abs=1e-9)
        assert math.sin(w) == pytest.approx(math.sin(theta), abs=1e-9)


class TestMotionVectors:
    def test_stationary_agent_all_zero(self):
        t = track(np.tile([2.0, 3.0], (sc.T_TOTAL, 1)))
        vecs, pad = sc.motion_vectors(t)
        assert vecs.shape == (sc.T_HISTORY, 2)
        np.testing.assert_array_equal(vecs, 0.0)

    def test_constant_velocity_along_heading(self):
        t = straight_track(np.zeros(2), math.radians(37), 1.0)
        vecs, pad = sc.motion_vectors(t)
        assert pad[0] and not pad[1:].any()
        np.testing.assert_allclose(vecs[1:], [[0.1, 0.0]] * 19, atol=1e-12)

    def test_leading_invalid_steps_padded(self):
        t = straight_track(np.zeros(2), 0.0, 2.0)
        mask = t.mask.copy()
        mask[:5] = False
        t = sc.AgentTrack(0, t.xy, mask)
        vecs, pad = sc.motion_vectors(t)
        assert pad[:5].all()
        np.testing.assert_array_equal(vecs[:5], 0.0)
        assert not pad[6:].any()

    def test_output_length_always_t_history(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            mask = rng.random(sc.T_TOTAL) > 0.4
            mask[sc.CURRENT] = True
            t = sc.AgentTrack(0, rng.normal(size=(sc.T_TOTAL, 2)), mask)
            vecs, pad = sc.motion_vectors(t)
            assert vecs.shape == (sc.T_HISTORY, 2) and pad.shape == (sc.T_HISTORY,)

    def test_invalid_current_step_rejected(self):
        t = straight_track(np.zeros(2), 0.0, 1.0)
        mask = t.mask.copy()
        mask[sc.CURRENT] = False
        with pytest.raises(SceneFormatError):
            sc.motion_vectors(sc.AgentTrack(0, t.xy, mask))


class TestRelativePose:
    def test_identical_pose(self):
        a = straight_track(np.zeros(2), 0.3, 5.0)
        pose = sc.relative_pose(a, a)
        np.testing.assert_allclose(pose.translation, 0.0, atol=1e-12)
        assert pose.heading == pytest.approx(0.0)

    def test_ten_meters_ahead(self):
        h = math.radians(25)
        a = straight_track(np.zeros(2), h, 5.0)
        ahead = a.position + 10.0 * np.array([math.cos(h), math.sin(h)])
        b = straight_track(ahead - a.position + np.zeros(2), h, 5.0, agent_id=1)
        # place b so its *current* position is 10 m ahead of a's
        offset = ahead - b.position
        b = sc.AgentTrack(1, b.xy + offset, b.mask)
        pose = sc.relative_pose(a, b)
        np.testing.assert_allclose(pose.translation, [10.0, 0.0], atol=1e-9)
        assert pose.heading == pytest.approx(0.0, abs=1e-12)

    def test_heading_antisymmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            a = straight_track(rng.normal(size=2) * 20,
                               rng.uniform(-math.pi, math.pi), 3.0)
            b = straight_track(rng.normal(size=2) * 20,
                               rng.uniform(-math.pi, math.pi), 4.0, agent_id=1)
            hij = sc.relative_pose(a, b).heading
            hji = sc.relative_pose(b, a).heading
            assert math.cos(hij + hji) == pytest.approx(1.0, abs=1e-9)


class TestLaneSegments:
    def test_collinear_unit_spacing(self):
        lane = straight_lane()
        feats = sc.lane_segments(lane, np.zeros(2), 0.0)
        assert feats.shape == (9, sc.LANE_FEATURE_DIM)
        for k in range(9):
            np.testing.assert_allclose(feats[k, :2], [k, 0.0], atol=1e-12)
            np.testing.assert_allclose(feats[k, 2:4], [1.0, 0.0], atol=1e-12)

    def test_segment_count_always_nine(self):
        rng = np.random.default_rng(3)
        pts = np.cumsum(rng.uniform(0.5, 2.0, size=(10, 2)), axis=0)
        feats = sc.lane_segments(sc.LanePolyline(pts), rng.normal(size=2), 0.7)
        assert feats.shape[0] == 9

    def test_attribute_onehot_width_five(self):
        lane = straight_lane(intersection=True, control=True, turn="left")
        feats = sc.lane_segments(lane, np.zeros(2), 0.0)
        np.testing.assert_array_equal(feats[0, 4:], [1, 1, 1, 0, 0])
        lane2 = straight_lane(turn="none")
        feats2 = sc.lane_segments(lane2, np.zeros(2), 0.0)
        np.testing.assert_array_equal(feats2[0, 4:], [0, 0, 0, 0, 1])

    def test_lane_invariants(self):
        with pytest.raises(SceneFormatError):
            sc.LanePolyline(np.zeros((9, 2)))
        with pytest.raises(SceneFormatError):
            sc.LanePolyline(np.zeros((10, 2)))  # coincident points
        with pytest.raises(SceneFormatError):
            straight_lane(turn="u-turn")


class TestSampling:
    def _pair_scene(self, distance):
        a = straight_track(np.zeros(2), 0.0, 1.0)
        b = straight_track(np.array([0.0, distance])
                           - np.array([1.9, 0.0]) * 0 , 0.0, 1.0, agent_id=1)
        # shift b so its current position sits `distance` away from a's
        shift = (a.position + [0.0, distance]) - b.position
        b = sc.AgentTrack(1, b.xy + shift, b.mask)
        return simple_scene([a, b])

    def test_neighbor_inside_radius(self):
        assert sc.sample_neighbors(self._pair_scene(49.9), 0, 50.0) == [1]

    def test_neighbor_on_boundary_included(self):
        assert sc.sample_neighbors(self._pair_scene(50.0), 0, 50.0) == [1]

    def test_neighbor_outside(self):
        assert sc.sample_neighbors(self._pair_scene(50.01), 0, 50.0) == []

    def test_single_agent_scene_empty(self):
        scene = simple_scene([straight_track(np.zeros(2), 0.0, 1.0)])
        assert sc.sample_neighbors(scene, 0, 50.0) == []

    def test_membership_symmetry(self):
        rng = np.random.default_rng(4)
        tracks = [straight_track(rng.normal(size=2) * 60,
                                 rng.uniform(-math.pi, math.pi), 2.0, agent_id=i)
                  for i in range(8)]
        scene = simple_scene(tracks)
        nbrs = [set(sc.sample_neighbors(scene, i, 50.0)) for i in range(8)]
        for i in range(8):
            for j in nbrs[i]:
                assert i in nbrs[j]

    def test_lane_sampling_by_any_point(self):
        far = straight_lane(start=(120.0, 0.0))        # all points >= 120 m
        near_end = straight_lane(start=(80.0, 0.0))    # first point at 80 m
        scene = simple_scene([straight_track(np.zeros(2), 0.0, 0.0)],
                             lanes=[far, near_end])
        # agent current position is at the origin (stationary)
        assert sc.sample_lanes(scene, 0, 100.0) == [1]
        assert sc.sample_lanes(scene, 0, 50.0) == []

    def test_default_radii_from_config(self):
        from fimp.config import TrainConfig
        cfg = TrainConfig()
        assert cfg.agent_radius == 50.0
        assert cfg.lane_radius == 50.0
        assert cfg.future_lane_radius == 100.0


class TestRigidInvariance:
    def test_local_views_invariant(self):
        rng = np.random.default_rng(5)
        tracks = [straight_track(rng.normal(size=2) * 30,
                                 rng.uniform(-math.pi, math.pi),
                                 rng.uniform(1.0, 10.0), agent_id=i)
                  for i in range(5)]
        lanes = [straight_lane(start=tuple(rng.normal(size=2) * 20),
                               heading=rng.uniform(-3, 3))
                 for _ in range(3)]
        scene = simple_scene(tracks, lanes)
        moved = sc.rigid_transform_scene(scene, rng.uniform(-math.pi, math.pi),
                                         rng.normal(size=2) * 500)
        for i in range(5):
            v1 = sc.build_local_view(scene, i)
            v2 = sc.build_local_view(moved, i)
            np.testing.assert_allclose(v1.motion, v2.motion, atol=1e-6)
            np.testing.assert_array_equal(v1.neighbors, v2.neighbors)
            for p1, p2 in zip(v1.neighbor_poses, v2.neighbor_poses):
                np.testing.assert_allclose(p1.encode(), p2.encode(), atol=1e-6)
            np.testing.assert_allclose(v1.lane_segments, v2.lane_segments,
                                       atol=1e-6)


class TestSceneFile:
    def _roundtrip_scene(self):
        from fimp.scenariogen import ScenarioSpec, generate
        scene, _ = generate(ScenarioSpec("oncoming", agent_count=5, seed=9))
        return scene

    def test_round_trip(self, tmp_path):
        scene = self._roundtrip_scene()
        path = tmp_path / "scenes.jsonl"
        sc.save_scene_file(path, [scene])
        loaded = sc.load_scene_file(path)
        assert len(loaded) == 1
        got = loaded[0]
        assert got.scene_id == scene.scene_id
        assert got.av_index == scene.av_index
        for a, b in zip(scene.agents, got.agents):
            np.testing.assert_array_equal(a.xy, b.xy)
            np.testing.assert_array_equal(a.mask, b.mask)
        for a, b in zip(scene.lanes, got.lanes):
            np.testing.assert_array_equal(a.points, b.points)
            assert (a.intersection, a.control, a.turn) == \
                (b.intersection, b.control, b.turn)

    def test_missing_av_index_names_field(self, tmp_path):
        scene = self._roundtrip_scene()
        rec = sc.scene_to_record(scene)
        del rec["av_index"]
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(SceneFormatError, match="av_index"):
            sc.load_scene_file(path)

    def test_nineteen_step_agent_rejected(self, tmp_path):
        scene = self._roundtrip_scene()
        rec = sc.scene_to_record(scene)
        rec["agents"][0]["xy"] = rec["agents"][0]["xy"][:19]
        rec["agents"][0]["mask"] = rec["agents"][0]["mask"][:19]
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(SceneFormatError, match="19"):
            sc.load_scene_file(path)

    def test_inference_input_without_future(self, tmp_path):
        scene = self._roundtrip_scene()
        path = tmp_path / "obs.jsonl"
        sc.save_scene_file(path, [scene], include_future=False)
        got = sc.load_scene_file(path)[0]
        assert not got.agents[0].mask[sc.T_HISTORY:].any()
        assert got.agents[0].mask[:sc.T_HISTORY].all()

    def test_unknown_schema_version(self, tmp_path):
        rec = sc.scene_to_record(self._roundtrip_scene())
        rec["schema_version"] = 99
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(SceneFormatError, match="schema_version"):
            sc.load_scene_file(path)

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json}\n")
        with pytest.raises(SceneFormatError, match=":1"):
            sc.load_scene_file(path)

    def test_non_finite_position_rejected(self, tmp_path):
        rec = sc.scene_to_record(self._roundtrip_scene())
        rec["agents"][0]["xy"][0][0] = float("nan")
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(SceneFormatError, match="finite"):
            sc.load_scene_file(path)
