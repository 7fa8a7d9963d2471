"""Incremental pipeline tests: tracks, the engine, filtering, ingestion."""
from __future__ import annotations

import logging

import numpy as np
import pytest

from semsfm.config import PipelineConfig
from semsfm.features import Feature, MatchSet
from semsfm.geometry import CameraIntrinsics, Observation, Pose
from semsfm.imaging import GROUND
from semsfm.reconstruct import (
    IngestError,
    Reconstruction,
    ReconstructionError,
    Track,
    build_tracks,
    filter_points,
    ingest_external_cloud,
    load_tracks,
    reconstruct_from_matches,
    run_sfm,
    save_tracks,
)
from semsfm.scene import cast_rays

INTR = CameraIntrinsics(800.0, 400.0, 300.0, 800, 600)
ZERO_DESC = np.zeros(4)


def feat(index: int, image: int, label: int = 1) -> Feature:
    """Feature whose pixel encodes (index, image) so tests can identify it."""
    return Feature(index, (float(index), float(image)), ZERO_DESC, label)


def feature_table(n_images: int, n_feats: int, labels=None) -> list[list[Feature]]:
    return [
        [feat(k, img, labels[img][k] if labels else 1) for k in range(n_feats)]
        for img in range(n_images)
    ]


class TestBuildTracks:
    def test_chain_merges_to_one_track(self):
        feats = feature_table(3, 5)
        sets = [
            MatchSet((0, 1), ((1, 2, 0.0),)),
            MatchSet((1, 2), ((2, 3, 0.0),)),
        ]
        tracks = build_tracks(sets, feats)
        assert len(tracks) == 1
        got = {(o.image_id, o.uv) for o in tracks[0].observations}
        assert got == {(0, (1.0, 0.0)), (1, (2.0, 1.0)), (2, (3.0, 2.0))}

    def test_inconsistent_component_discarded(self):
        feats = feature_table(2, 10)
        sets = [MatchSet((0, 1), ((1, 2, 0.0), (9, 2, 0.0)))]
        # features 1 and 9 of image 0 both link to feature 2 of image 1
        assert build_tracks(sets, feats) == []

    def test_observations_carry_labels(self):
        labels = [[3, 1, 4], [2, 2, 5]]
        feats = feature_table(2, 3, labels)
        tracks = build_tracks([MatchSet((0, 1), ((0, 2, 0.0),))], feats)
        assert len(tracks) == 1
        by_img = {o.image_id: o.label for o in tracks[0].observations}
        assert by_img == {0: 3, 1: 5}

    def test_matches_connected_components_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            n_images = rng.integers(2, 6)
            n_feats = rng.integers(2, 8)
            feats = feature_table(int(n_images), int(n_feats))
            pairs = [(i, j) for i in range(n_images) for j in range(i + 1, n_images)]
            edges = []
            sets = []
            for (i, j) in pairs:
                m = []
                for _ in range(rng.integers(0, 4)):
                    a, b = int(rng.integers(n_feats)), int(rng.integers(n_feats))
                    m.append((a, b, 0.0))
                    edges.append(((i, a), (j, b)))
                if m:
                    sets.append(MatchSet((i, j), tuple(m)))

            adj: dict = {}
            for u, v in edges:
                adj.setdefault(u, set()).add(v)
                adj.setdefault(v, set()).add(u)
            seen: set = set()
            want = set()
            for start in adj:
                if start in seen:
                    continue
                comp = {start}
                stack = [start]
                while stack:
                    for nb in adj[stack.pop()]:
                        if nb not in comp:
                            comp.add(nb)
                            stack.append(nb)
                seen |= comp
                images = [img for img, _ in comp]
                if len(images) == len(set(images)) and len(comp) >= 2:
                    want.add(frozenset(comp))

            got = {
                frozenset((o.image_id, int(o.uv[0])) for o in t.observations)
                for t in build_tracks(sets, feats)
            }
            assert got == want


def lookat_pose(center, target):
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, -1.0, 0.0])
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ center)


def exact_two_view_inputs(n=60):
    """Two cameras and exact pixel observations of a boxful of points."""
    rng = np.random.default_rng(3)
    pts = rng.uniform([-6, -6, -3], [6, 6, 3], size=(n, 3))
    poses = [lookat_pose([0, -2, -22], [0, 0, 0]),
             lookat_pose([6, 3, -20], [0, 0, 0])]
    features = []
    for pose in poses:
        q = (pts @ pose.R.T) + pose.t
        uv = INTR.focal * q[:, :2] / q[:, 2:3] + [INTR.cx, INTR.cy]
        features.append([
            Feature(k, (float(u), float(v)), ZERO_DESC, GROUND)
            for k, (u, v) in enumerate(uv)
        ])
    sets = {(0, 1): MatchSet((0, 1), tuple((k, k, 0.0) for k in range(n)))}
    return pts, poses, features, sets


class TestEngine:
    def test_two_view_exact_observations(self):
        pts, poses, features, sets = exact_two_view_inputs()
        rec = reconstruct_from_matches(features, sets, INTR)
        assert sorted(rec.poses) == [0, 1]
        assert rec.unregistered == []
        assert len(rec.triangulated()) == len(pts)
        assert rec.rms_reprojection() < 1e-3

    def test_no_matches_fails(self):
        features = feature_table(2, 10)
        with pytest.raises(ReconstructionError, match="verified"):
            reconstruct_from_matches(features, {}, INTR)

    def test_too_few_images_fails(self, small_survey):
        ds = small_survey.dataset
        single = type(ds)(ds.intrinsics, {0: ds.images[0]}, {0: ds.labels[0]},
                          {0: "0000.ppm"}, [])
        with pytest.raises(ReconstructionError, match="2 images"):
            run_sfm(single, small_survey.config)

    def test_survey_registers_and_aligns(self, small_survey, small_reconstruction):
        rec = small_reconstruction
        n = len(small_survey.frames)
        assert len(rec.poses) >= 0.9 * n
        assert rec.aligned
        assert rec.rms_reprojection() < 1.0
        assert len(rec.triangulated()) > 200

    def test_recovered_poses_match_ground_truth(self, small_survey,
                                                small_reconstruction):
        rec = small_reconstruction
        for image_id, pose in rec.poses.items():
            gt = small_survey.frames[image_id].true_pose
            dR = pose.R @ gt.R.T
            angle = np.degrees(np.arccos(np.clip((np.trace(dR) - 1) / 2, -1, 1)))
            assert angle < 0.5
            assert np.linalg.norm(pose.center() - gt.center()) < 0.5

    def test_no_duplicate_image_per_track(self, small_reconstruction):
        for t in small_reconstruction.tracks:
            t.validate()

    def test_determinism(self, small_survey, small_reconstruction):
        again = run_sfm(small_survey.dataset, small_survey.config)
        assert sorted(again.poses) == sorted(small_reconstruction.poses)
        assert len(again.triangulated()) == len(small_reconstruction.triangulated())
        np.testing.assert_allclose(
            again.points, small_reconstruction.points, atol=1e-9)


class TestFilterPoints:
    def lattice_rec(self, extra=None):
        g = np.arange(5, dtype=np.float64)
        pts = np.array(np.meshgrid(g, g, g)).reshape(3, -1).T
        if extra is not None:
            pts = np.vstack([pts, extra])
        tracks = [Track(k, [], point=p) for k, p in enumerate(pts)]
        return Reconstruction(INTR, tracks=tracks)

    def test_lattice_plus_far_point_removes_exactly_it(self):
        rec = self.lattice_rec(extra=[[100.0, 100.0, 100.0]])
        out = filter_points(rec, PipelineConfig())
        assert len(out.tracks) == 125
        assert all(t.point[0] <= 4.0 for t in out.tracks)

    def test_zero_reprojection_keeps_everything(self):
        pts, poses, features, sets = exact_two_view_inputs(20)
        rec = reconstruct_from_matches(features, sets, INTR)
        before = list(rec.triangulated())
        # knn beyond the cloud size isolates the reprojection stage
        out = filter_points(rec, PipelineConfig(filter_knn=50))
        assert out.tracks == before

    def test_monotone_subset_same_objects(self):
        rec = self.lattice_rec(extra=[[100.0, 100.0, 100.0], [0.5, 0.5, 0.5]])
        out = filter_points(rec, PipelineConfig())
        originals = {id(t) for t in rec.tracks}
        assert all(id(t) in originals for t in out.tracks)
        assert len(out.tracks) <= len(rec.tracks)

    def test_small_cloud_skips_statistical_stage(self, caplog):
        g = np.arange(2, dtype=np.float64)
        pts = np.array(np.meshgrid(g, g)).reshape(2, -1).T
        tracks = [Track(k, [], point=np.array([x, y, 0.0]))
                  for k, (x, y) in enumerate(pts)]
        rec = Reconstruction(INTR, tracks=tracks)
        with caplog.at_level(logging.WARNING, logger="semsfm.reconstruct"):
            out = filter_points(rec, PipelineConfig(filter_knn=8))
        assert len(out.tracks) == 4
        assert any("skipped" in r.message for r in caplog.records)

    def test_reprojection_gate_drops_bad_track(self):
        pts, poses, features, sets = exact_two_view_inputs(20)
        rec = reconstruct_from_matches(features, sets, INTR)
        victim = rec.triangulated()[0]
        victim.point = victim.point + 5.0  # now reprojects far off
        out = filter_points(rec, PipelineConfig(filter_knn=50))
        assert victim not in out.tracks
        assert len(out.tracks) == 19


class TestIngestExternalCloud:
    def write_visibility(self, tmp_path, lines):
        path = tmp_path / "visibility.txt"
        path.write_text("\n".join(lines) + "\n")
        return str(path)

    def nadir_pose(self, x, y, z):
        R = np.diag([1.0, -1.0, -1.0])
        C = np.array([x, y, z], dtype=np.float64)
        return Pose(R, -R @ C)

    def test_empty_visibility_gives_empty_track(self, tmp_path):
        path = self.write_visibility(tmp_path, ["1.0 2.0 3.0 0"])
        tracks = ingest_external_cloud(path, {}, INTR, {})
        assert len(tracks) == 1
        assert tracks[0].observations == []
        np.testing.assert_array_equal(tracks[0].point, [1.0, 2.0, 3.0])

    def test_behind_camera_views_dropped(self, tmp_path):
        poses = {0: self.nadir_pose(0.0, 0.0, 50.0),
                 1: self.nadir_pose(0.0, 0.0, -50.0)}  # below, looking away
        path = self.write_visibility(tmp_path, ["0 0 0 2 0 1"])
        tracks = ingest_external_cloud(path, poses, INTR, {})
        assert [o.image_id for o in tracks[0].observations] == [0]

    def test_projected_labels_match_raycast(self, small_survey, tmp_path):
        fx = small_survey
        x, y = 60.0, 60.0
        z = float(fx.scene.ground.height(x, y))
        point = np.array([x, y, z])
        origin = np.array([x, y, fx.scene.max_surface_z + 40.0])
        _, truth, _, _, _ = cast_rays(fx.scene, origin, np.array([[0, 0, -1.0]]))

        poses = {f.image_id: f.true_pose for f in fx.frames}
        intr = fx.config.intrinsics
        visible = []
        for image_id, pose in sorted(poses.items()):
            q = pose.R @ point + pose.t
            if q[2] <= 0:
                continue
            u = intr.focal * q[0] / q[2] + intr.cx
            v = intr.focal * q[1] / q[2] + intr.cy
            if 0 <= u <= intr.width - 1 and 0 <= v <= intr.height - 1:
                visible.append(image_id)
        assert len(visible) >= 5
        visible = visible[:5]

        path = self.write_visibility(
            tmp_path, [f"{x} {y} {z} 5 " + " ".join(map(str, visible))])
        labels = {f.image_id: f.labels for f in fx.frames}
        tracks = ingest_external_cloud(path, poses, intr, labels)
        assert len(tracks[0].observations) == 5
        agree = sum(1 for o in tracks[0].observations if o.label == truth[0])
        assert agree >= 4  # border pixels may sample a neighboring surface

    def test_unknown_image_id(self, tmp_path):
        path = self.write_visibility(tmp_path, ["0 0 0 1 99"])
        with pytest.raises(IngestError, match="unknown image id 99"):
            ingest_external_cloud(path, {}, INTR, {})

    @pytest.mark.parametrize("line,message", [
        ("1.0 2.0", "expected"),
        ("0 0 0 2 5", "declared 2"),
        ("a b c 0", "non-numeric"),
    ])
    def test_malformed_lines_name_line_number(self, tmp_path, line, message):
        path = self.write_visibility(tmp_path, ["# comment", line])
        with pytest.raises(IngestError, match=f"line 2.*{message}"):
            ingest_external_cloud(path, {0: self.nadir_pose(0, 0, 50)}, INTR, {})


class TestTrackSerialization:
    def test_round_trip(self, tmp_path):
        tracks = [
            Track(0, [Observation(0, (1.5, 2.5), 3), Observation(2, (4.0, 5.0), 1)],
                  point=np.array([0.1, -0.2, 7.0])),
            Track(1, [Observation(1, (9.0, 9.0), 2)]),
        ]
        path = str(tmp_path / "tracks.txt")
        save_tracks(tracks, path)
        loaded = load_tracks(path)
        assert len(loaded) == 2
        for want, got in zip(tracks, loaded):
            assert got.track_id == want.track_id
            assert got.observations == want.observations
            if want.point is None:
                assert got.point is None
            else:
                np.testing.assert_array_equal(got.point, want.point)

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "tracks.txt"
        path.write_text("#semantic-sfm tracks v1\n0 1 2.0\n")
        with pytest.raises(IngestError, match="line 2"):
            load_tracks(str(path))
