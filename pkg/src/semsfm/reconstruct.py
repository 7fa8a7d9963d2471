"""Incremental structure-from-motion over labeled feature tracks.

Pipeline: detect features, match every image pair, apply the label-agreement
filter, verify pairs geometrically, merge surviving matches into tracks,
initialize from the strongest wide-baseline pair, then grow by resecting the
image with the most 2D-3D correspondences, triangulating newly completable
tracks, and bundle-adjusting on a fixed cadence. Everything is deterministic
for a fixed seed: per-pair RANSAC draws come from (seed, i, j) streams, so
thread scheduling cannot change any result.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .config import PipelineConfig
from .features import Feature, MatchSet, detect_features, match_pair, semantic_filter
from .geometry import (
    BAConfig,
    CameraIntrinsics,
    Observation,
    Pose,
    RansacParams,
    _triangulate_pair_fast,
    align_to_gcps,
    bundle_adjust_arrays,
    normalized_coords,
    project,
    project_many,
    resect,
    estimate_relative_pose,
    triangulate,
)
from .imaging import LabelImage, label_at

log = logging.getLogger(__name__)


class ReconstructionError(RuntimeError):
    """No valid seed pair or other unrecoverable pipeline failure."""


class IngestError(RuntimeError):
    """Malformed external cloud or visibility input."""


@dataclass
class Track:
    track_id: int
    observations: list[Observation]
    point: np.ndarray | None = None

    def validate(self) -> None:
        ids = [o.image_id for o in self.observations]
        if len(ids) != len(set(ids)):
            raise AssertionError(f"track {self.track_id} observes an image twice")


@dataclass
class Reconstruction:
    intrinsics: CameraIntrinsics
    poses: dict[int, Pose] = field(default_factory=dict)
    tracks: list[Track] = field(default_factory=list)
    aligned: bool = False
    gauge_image: int | None = None
    unregistered: list[int] = field(default_factory=list)

    def triangulated(self) -> list[Track]:
        return [t for t in self.tracks if t.point is not None]

    @property
    def points(self) -> np.ndarray:
        tri = self.triangulated()
        if not tri:
            return np.empty((0, 3))
        return np.array([t.point for t in tri])

    def observation_arrays(self):
        """(image ids, point row indices, pixels) over posed observations."""
        cam_ids, pt_idx, uv = [], [], []
        for row, t in enumerate(self.triangulated()):
            for o in t.observations:
                if o.image_id in self.poses:
                    cam_ids.append(o.image_id)
                    pt_idx.append(row)
                    uv.append(o.uv)
        return (
            np.array(cam_ids, dtype=np.int64),
            np.array(pt_idx, dtype=np.int64),
            np.array(uv, dtype=np.float64).reshape(-1, 2),
        )

    def set_geometry(self, poses: dict[int, Pose], points: np.ndarray) -> None:
        self.poses = poses
        tri = self.triangulated()
        if len(points) != len(tri):
            raise ValueError("point array size does not match triangulated tracks")
        for t, p in zip(tri, points):
            t.point = np.asarray(p, dtype=np.float64)

    def reprojection_errors(self):
        """Per-observation pixel errors plus their (cam, point-row) indexing."""
        cam_ids, pt_idx, uv = self.observation_arrays()
        if len(uv) == 0:
            return np.empty(0), cam_ids, pt_idx
        pts = self.points
        err = np.empty(len(uv))
        for c in np.unique(cam_ids):
            m = cam_ids == c
            pred, z = project_many(pts[pt_idx[m]], self.poses[c], self.intrinsics)
            e = np.linalg.norm(pred - uv[m], axis=1)
            e[~np.isfinite(e)] = np.inf
            err[m] = e
        return err, cam_ids, pt_idx

    def rms_reprojection(self) -> float:
        err, _, _ = self.reprojection_errors()
        finite = err[np.isfinite(err)]
        if len(finite) == 0:
            return float("nan")
        return float(np.sqrt(np.mean(finite**2)))


# --- track building ----------------------------------------------------------

class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        root = x
        while self.parent.setdefault(root, root) != root:
            root = self.parent[root]
        while self.parent[x] != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_tracks(match_sets, features: list[list[Feature]]) -> list[Track]:
    """Union-find merge of pairwise matches into multi-image tracks.

    Any connected component containing two distinct features of the same
    image is contradictory and is discarded whole. Surviving components
    become tracks whose observations carry each feature's pixel and label.
    """
    uf = _UnionFind()
    for ms in match_sets:
        i, j = ms.pair
        for a, b, _ in ms.matches:
            uf.union((i, a), (j, b))

    groups: dict = {}
    for node in list(uf.parent):
        groups.setdefault(uf.find(node), []).append(node)

    tracks = []
    for root in sorted(groups):
        nodes = sorted(groups[root])
        images = [img for img, _ in nodes]
        if len(images) != len(set(images)):
            continue  # two features of one image: inconsistent component
        if len(nodes) < 2:
            continue
        obs = [
            Observation(img, features[img][fi].uv, features[img][fi].label)
            for img, fi in nodes
        ]
        tracks.append(Track(len(tracks), obs))
    return tracks


# --- incremental engine --------------------------------------------------------

def _pair_seed(base_seed: int, i: int, j: int) -> list[int]:
    return [base_seed, i, j]


def _median_parallax_deg(pose_rel: Pose, uv1, uv2, mask, intr) -> float:
    x1 = normalized_coords(uv1[mask], intr)
    x2 = normalized_coords(uv2[mask], intr)
    pts, z1, z2 = _triangulate_pair_fast(pose_rel.R, pose_rel.t, x1, x2)
    ok = (z1 > 0) & (z2 > 0)
    if not ok.any():
        return 0.0
    pts = pts[ok]
    c1 = np.zeros(3)
    c2 = pose_rel.center()
    r1 = c1 - pts
    r2 = c2 - pts
    cosang = np.einsum("ni,ni->n", r1, r2) / (
        np.linalg.norm(r1, axis=1) * np.linalg.norm(r2, axis=1)
    )
    ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return float(np.median(ang))


def reconstruct_from_matches(features: list[list[Feature]],
                             match_sets: dict[tuple[int, int], MatchSet],
                             intr: CameraIntrinsics,
                             config: PipelineConfig | None = None) -> Reconstruction:
    """Run the incremental engine on prepared matches.

    `features` holds one feature list per image id; `match_sets` maps (i, j)
    with i < j to the matches that survived semantic filtering. Raises
    ReconstructionError when no seed pair verifies geometrically.
    """
    config = config or PipelineConfig()
    n_images = len(features)

    # Geometric verification of every matched pair.
    verified: dict[tuple[int, int], tuple[Pose, list]] = {}
    for (i, j), ms in sorted(match_sets.items()):
        if len(ms.matches) < 8:
            continue
        params = RansacParams(config.ransac_threshold_px, config.ransac_iterations,
                              _pair_seed(config.seed, i, j))
        res = estimate_relative_pose(ms, features[i], features[j], intr, params)
        if res is None:
            continue
        pose, mask = res
        inliers = [m for m, keep in zip(ms.matches, mask) if keep]
        verified[(i, j)] = (pose, inliers)
    if not verified:
        raise ReconstructionError("no image pair verified geometrically")

    tracks = build_tracks(
        [MatchSet(pair, tuple(inl)) for pair, (_, inl) in verified.items()],
        features,
    )
    rec = Reconstruction(intr, tracks=tracks)
    image_to_tracks: dict[int, list[int]] = {}
    for k, t in enumerate(tracks):
        t.validate()
        for o in t.observations:
            image_to_tracks.setdefault(o.image_id, []).append(k)

    # Seed pair: most inliers, subject to a median-parallax floor.
    order = sorted(verified, key=lambda p: (-len(verified[p][1]), p))
    seed_pair = None
    for (i, j) in order:
        pose, inl = verified[(i, j)]
        uv1 = np.array([features[i][a].uv for a, _, _ in inl])
        uv2 = np.array([features[j][b].uv for _, b, _ in inl])
        med = _median_parallax_deg(pose, uv1, uv2, np.ones(len(inl), dtype=bool), intr)
        if med >= config.seed_parallax_deg:
            seed_pair = (i, j)
            break
    if seed_pair is None:
        raise ReconstructionError(
            "no seed pair with sufficient parallax "
            f"(best pairs: {[p for p in order[:3]]})"
        )
    i, j = seed_pair
    rec.gauge_image = i
    rec.poses[i] = Pose(np.eye(3), np.zeros(3))
    rec.poses[j] = verified[seed_pair][0]
    log.info("seed pair (%d, %d) with %d inliers", i, j, len(verified[seed_pair][1]))

    def try_triangulate(track_indices):
        for k in track_indices:
            t = tracks[k]
            if t.point is not None:
                continue
            obs = [(o, rec.poses[o.image_id]) for o in t.observations
                   if o.image_id in rec.poses]
            if len(obs) < 2:
                continue
            X, reason = triangulate(obs, intr, config.triangulation_gate_px,
                                    config.min_parallax_deg)
            if reason == "ok":
                t.point = X

    def rebuild_index():
        image_to_tracks.clear()
        for k, t in enumerate(tracks):
            for o in t.observations:
                image_to_tracks.setdefault(o.image_id, []).append(k)

    def prune_observations():
        """Drop posed observations that disagree with their track's point.

        Wrong pairwise links survive geometric verification when they happen
        to be epipolar-consistent (common over near-planar ground), so each
        observation is checked against the track point once its image has a
        pose. Tracks left with under two posed observations lose the point.
        """
        removed = 0
        for t in tracks:
            if t.point is None:
                continue
            kept = []
            for o in t.observations:
                pose = rec.poses.get(o.image_id)
                if pose is not None:
                    uv = project(t.point, pose, intr)
                    if uv is None or float(np.hypot(uv[0] - o.uv[0], uv[1] - o.uv[1])
                                           ) > config.triangulation_gate_px:
                        removed += 1
                        continue
                kept.append(o)
            if len(kept) != len(t.observations):
                t.observations = kept
                if sum(1 for o in kept if o.image_id in rec.poses) < 2:
                    t.point = None
        if removed:
            rebuild_index()
            log.info("pruned %d disagreeing observations", removed)

    def run_ba():
        cam_ids, pt_idx, uv = rec.observation_arrays()
        if len(uv) == 0 or len(rec.poses) < 2:
            return
        poses, points, info = bundle_adjust_arrays(
            rec.poses, rec.points, cam_ids, pt_idx, uv, intr,
            config=BAConfig(config.ba_max_iterations, config.ba_tolerance),
            gauge_cam=rec.gauge_image,
        )
        rec.set_geometry(poses, points)
        log.info("bundle adjustment: %d iterations, rms %.3f px",
                 info.iterations, info.rms(len(uv)))

    try_triangulate(image_to_tracks.get(i, []) + image_to_tracks.get(j, []))
    run_ba()
    prune_observations()

    since_ba = 0
    while len(rec.poses) < n_images:
        # Most 2D-3D correspondences first; ties go to the lowest image id.
        counts: dict[int, int] = {}
        for img in range(n_images):
            if img in rec.poses:
                continue
            counts[img] = sum(
                1 for k in set(image_to_tracks.get(img, []))
                if tracks[k].point is not None
            )
        candidates = sorted(counts, key=lambda im: (-counts[im], im))
        registered = None
        for img in candidates:
            if counts[img] < 6:
                break
            pts3d, pix = [], []
            for k in set(image_to_tracks.get(img, [])):
                t = tracks[k]
                if t.point is None:
                    continue
                for o in t.observations:
                    if o.image_id == img:
                        pts3d.append(t.point)
                        pix.append(o.uv)
            params = RansacParams(config.ransac_threshold_px,
                                  config.ransac_iterations,
                                  [config.seed, 7919, img],
                                  min_inliers=6)
            res = resect(np.array(pts3d), np.array(pix), intr, params)
            if res is None:
                continue
            rec.poses[img] = res[0]
            registered = img
            break
        if registered is None:
            break
        prune_observations()
        try_triangulate(image_to_tracks.get(registered, []))
        since_ba += 1
        if since_ba >= config.ba_cadence:
            try_triangulate(range(len(tracks)))
            run_ba()
            prune_observations()
            since_ba = 0

    try_triangulate(range(len(tracks)))
    run_ba()
    prune_observations()
    rec.unregistered = [im for im in range(n_images) if im not in rec.poses]
    if rec.unregistered:
        log.info("unregistered images: %s", rec.unregistered)
    return rec


def _thread_count(config: PipelineConfig) -> int:
    return config.threads if config.threads > 0 else (os.cpu_count() or 1)


def match_all_pairs(features: list[list[Feature]], config: PipelineConfig,
                    apply_semantic_filter: bool | None = None
                    ) -> dict[tuple[int, int], MatchSet]:
    """Descriptor-match every image pair, then label-filter each match set."""
    if apply_semantic_filter is None:
        apply_semantic_filter = config.semantic_filter
    pairs = [(i, j) for i in range(len(features)) for j in range(i + 1, len(features))]

    def work(pair):
        i, j = pair
        ms = match_pair(features[i], features[j], config.ratio, pair)
        if apply_semantic_filter:
            ms = semantic_filter(ms, features[i], features[j],
                                 config.min_inlier_fraction)
        return pair, ms

    out: dict[tuple[int, int], MatchSet] = {}
    with ThreadPoolExecutor(max_workers=_thread_count(config)) as pool:
        for pair, ms in pool.map(work, pairs):
            if ms.matches:
                out[pair] = ms
    return out


def run_sfm(dataset, config: PipelineConfig | None = None) -> Reconstruction:
    """Full pipeline from a loaded dataset to an aligned reconstruction.

    Ground-truth poses attached to the dataset are never consulted; GCP
    observations are used only for the final similarity alignment.
    """
    config = config or PipelineConfig()
    if len(dataset.images) < 2:
        raise ReconstructionError("need at least 2 images")
    intr = dataset.intrinsics
    ids = sorted(dataset.images)

    with ThreadPoolExecutor(max_workers=_thread_count(config)) as pool:
        features = list(
            pool.map(
                lambda i: detect_features(dataset.images[i], dataset.labels[i],
                                          config.max_features),
                ids,
            )
        )
    log.info("detected features: %s",
             {i: len(f) for i, f in zip(ids, features)})

    match_sets = match_all_pairs(features, config)
    rec = reconstruct_from_matches(features, match_sets, intr, config)

    # The engine indexes images 0..n-1 in sorted-id order; map back to
    # dataset ids so GCP observations and label rasters line up.
    if ids != list(range(len(ids))):
        rec.poses = {ids[k]: p for k, p in rec.poses.items()}
        rec.unregistered = [ids[k] for k in rec.unregistered]
        for track in rec.tracks:
            track.observations = [
                replace(o, image_id=ids[o.image_id]) for o in track.observations
            ]
        if rec.gauge_image is not None:
            rec.gauge_image = ids[rec.gauge_image]

    if dataset.gcps:
        report = align_to_gcps(rec, dataset.gcps)
        if report is None:
            log.warning("GCP alignment failed; reconstruction frame is arbitrary")
        else:
            log.info("GCP alignment: scale %.6g, mean residual %.4g m",
                     report.scale, report.mean_residual)
    return rec


# --- point filtering -----------------------------------------------------------

def filter_points(rec: Reconstruction, config: PipelineConfig | None = None
                  ) -> Reconstruction:
    """Reprojection gate plus statistical outlier removal on track points.

    Surviving tracks keep their identity (same objects), so any labels or
    confidences computed from them are unaffected. With fewer than knn+1
    points the statistical stage is skipped with a warning.
    """
    config = config or PipelineConfig()
    err, cam_ids, pt_idx = rec.reprojection_errors()
    tri = rec.triangulated()
    keep_mask = np.ones(len(tri), dtype=bool)
    if len(err):
        for row in np.unique(pt_idx[err > config.filter_reproj_px]):
            keep_mask[row] = False
    kept = [t for t, k in zip(tri, keep_mask) if k]

    if len(kept) < config.filter_knn + 1:
        log.warning("only %d points: statistical outlier stage skipped", len(kept))
    else:
        pts = np.array([t.point for t in kept])
        tree = cKDTree(pts)
        # k+1 because each point is its own nearest neighbor at distance 0
        dists, _ = tree.query(pts, k=config.filter_knn + 1)
        mean_d = dists[:, 1:].mean(axis=1)
        cutoff = mean_d.mean() + config.filter_std * mean_d.std()
        kept = [t for t, d in zip(kept, mean_d) if d <= cutoff]

    return Reconstruction(
        rec.intrinsics,
        poses=rec.poses,
        tracks=kept,
        aligned=rec.aligned,
        gauge_image=rec.gauge_image,
        unregistered=list(rec.unregistered),
    )


# --- external clouds -------------------------------------------------------------

def ingest_external_cloud(visibility_path: str, poses: dict[int, Pose],
                          intr: CameraIntrinsics,
                          label_images: dict[int, LabelImage]) -> list[Track]:
    """Turn an externally produced cloud with per-point visibility into tracks.

    Each visibility line is `x y z n img_1 ... img_n`. Every listed image is
    projected into; behind-camera projections are dropped from the
    observation set. Tracks may end up with fewer than 2 observations (even
    zero); downstream labeling reports them as dropped.
    """
    tracks: list[Track] = []
    with open(visibility_path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 4:
                raise IngestError(
                    f"{visibility_path} line {lineno}: expected 'x y z n ids...'"
                )
            try:
                X = np.array([float(parts[0]), float(parts[1]), float(parts[2])])
                n = int(parts[3])
                ids = [int(p) for p in parts[4:]]
            except ValueError:
                raise IngestError(
                    f"{visibility_path} line {lineno}: non-numeric field"
                ) from None
            if len(ids) != n:
                raise IngestError(
                    f"{visibility_path} line {lineno}: declared {n} images, "
                    f"found {len(ids)}"
                )
            obs = []
            for img in ids:
                if img not in poses:
                    raise IngestError(
                        f"{visibility_path} line {lineno}: unknown image id {img}"
                    )
                q = poses[img].R @ X + poses[img].t
                if q[2] <= 0:
                    continue
                u = intr.focal * q[0] / q[2] + intr.cx
                v = intr.focal * q[1] / q[2] + intr.cy
                label = label_at(label_images[img], u, v) if img in label_images else 0
                obs.append(Observation(img, (float(u), float(v)), label))
            tracks.append(Track(len(tracks), obs, point=X))
    return tracks


# --- track serialization -----------------------------------------------------------

TRACKS_HEADER = "#semantic-sfm tracks v1"


def save_tracks(tracks: list[Track], path: str) -> None:
    with open(path, "w") as f:
        f.write(TRACKS_HEADER + "\n")
        for t in tracks:
            for o in t.observations:
                f.write(f"{t.track_id} {o.image_id} {o.uv[0]:.17g} "
                        f"{o.uv[1]:.17g} {o.label}\n")
            if t.point is not None:
                f.write(f"point {t.track_id} {t.point[0]:.17g} "
                        f"{t.point[1]:.17g} {t.point[2]:.17g}\n")


def load_tracks(path: str) -> list[Track]:
    by_id: dict[int, Track] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "point":
                    if len(parts) != 5:
                        raise ValueError
                    tid = int(parts[1])
                    t = by_id.setdefault(tid, Track(tid, []))
                    t.point = np.array([float(parts[2]), float(parts[3]),
                                        float(parts[4])])
                else:
                    if len(parts) != 5:
                        raise ValueError
                    tid = int(parts[0])
                    t = by_id.setdefault(tid, Track(tid, []))
                    t.observations.append(
                        Observation(int(parts[1]),
                                    (float(parts[2]), float(parts[3])),
                                    int(parts[4]))
                    )
            except ValueError:
                raise IngestError(f"{path} line {lineno}: malformed row") from None
    return [by_id[k] for k in sorted(by_id)]
