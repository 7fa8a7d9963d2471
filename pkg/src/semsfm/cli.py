"""Command-line driver: synth | sfm | label | filter | report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 reconstruction failure.
Outputs are written atomically (temp file or directory, then rename), so a
failed run never leaves partial files behind. SEMANTIC_SFM_SEED provides the
seed when no flag or config sets one.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from .config import ConfigError, PipelineConfig, config_from_text
from .features import match_debug_rows  # noqa: F401  (re-export for debug tooling)
from .geometry import CameraIntrinsics, Pose, align_to_gcps
from .imaging import (
    DEFAULT_PALETTE,
    LabelDecodeError,
    RasterFormatError,
    decode_label_raster,
)
from .io import (
    PlyCloud,
    PlyParseError,
    ReconstructionStats,
    read_ply,
    write_ply,
    write_report,
)
from .reconstruct import (
    IngestError,
    Reconstruction,
    ReconstructionError,
    filter_points,
    ingest_external_cloud,
    run_sfm,
    save_tracks,
)
from .scene import (
    DatasetError,
    PlacementError,
    SceneParams,
    export_dataset,
    fill_gcp_observations,
    generate_scene,
    load_dataset,
    place_gcps,
    plan_survey,
    render_frame,
)
from .semantics import LabelingError, confidence_filter, label_reconstruction

log = logging.getLogger(__name__)

SEED_ENV = "SEMANTIC_SFM_SEED"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this artifact reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _env_seed(flag_value: int | None, default: int) -> int:
    if flag_value is not None:
        return flag_value
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(
            f"semsfm: error: {SEED_ENV}={raw!r} is not an integer"
        ) from None


def _atomic_directory(out_dir: str):
    """Context producing a staging dir that replaces out_dir on success."""

    class _Ctx:
        def __enter__(self):
            parent = os.path.dirname(os.path.abspath(out_dir)) or "."
            os.makedirs(parent, exist_ok=True)
            self.tmp = tempfile.mkdtemp(dir=parent, prefix=".semsfm-")
            return self.tmp

        def __exit__(self, exc_type, exc, tb):
            if exc_type is not None:
                shutil.rmtree(self.tmp, ignore_errors=True)
                return False
            if os.path.isdir(out_dir):
                if os.listdir(out_dir):
                    shutil.rmtree(self.tmp, ignore_errors=True)
                    raise DatasetError(f"output directory not empty: {out_dir}")
                os.rmdir(out_dir)
            os.replace(self.tmp, out_dir)
            return False

    return _Ctx()


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = _env_seed(args.seed, 7)
    params = SceneParams(extent=args.extent, tree_count=args.trees,
                         bush_count=args.bushes)
    intr = CameraIntrinsics(args.focal, args.width / 2.0, args.height / 2.0,
                            args.width, args.height)
    scene = generate_scene(seed, params)
    gcps = place_gcps(scene, args.gcps, seed + 1)
    plan = plan_survey(scene, args.altitude, args.overlap_fwd,
                       args.overlap_side, intr)
    log.info("survey plan: %d images at %.1f m", len(plan), args.altitude)
    frames = []
    for image_id, pose in enumerate(plan.poses):
        frames.append(render_frame(scene, pose, intr, image_id))
        if (image_id + 1) % 10 == 0:
            log.info("rendered %d / %d frames", image_id + 1, len(plan))
    fill_gcp_observations(gcps, plan.poses, intr, scene)
    with _atomic_directory(args.out) as staging:
        export_dataset(frames, gcps, staging, intr)
    print(f"dataset: {len(frames)} images, {len(gcps)} GCPs -> {args.out}")
    return 0


def _resolved_config(args) -> PipelineConfig:
    config = PipelineConfig()
    if getattr(args, "config", None):
        with open(args.config) as f:
            config = config_from_text(f.read(), config)
    overrides = {}
    if getattr(args, "seed", None) is not None or os.environ.get(SEED_ENV):
        overrides["seed"] = _env_seed(args.seed, config.seed)
    if getattr(args, "no_semantic_filter", False):
        overrides["semantic_filter"] = False
    if getattr(args, "oob_votes", None):
        overrides["oob_votes"] = args.oob_votes
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    return config.replace(**overrides) if overrides else config


def cmd_sfm(args) -> int:
    config = _resolved_config(args)
    dataset = load_dataset(args.dataset)
    if args.no_gcp:
        dataset.gcps = []
    rec = run_sfm(dataset, config)
    gcp_report = None
    if dataset.gcps and rec.aligned:
        # Residuals for the report come from re-running the (now identity)
        # alignment; cheap and reuses the same triangulation path.
        gcp_report = align_to_gcps(rec, dataset.gcps)
    filtered = filter_points(rec, config)
    labeled = label_reconstruction(
        filtered,
        dataset.labels,
        rgb_images=dataset.images,
        oob=config.oob_votes,
    )
    stats = ReconstructionStats(
        registered_images=len(rec.poses),
        total_images=len(dataset.images),
        point_count=len(labeled),
        rms_reprojection_px=filtered.rms_reprojection(),
        gcp_residuals=gcp_report.residuals if gcp_report else {},
        config_hash=config.config_hash(),
    )
    cloud = PlyCloud(
        labeled.points,
        comments=[
            f"semantic-sfm config_hash {config.config_hash()}",
            f"semantic-sfm registered {len(rec.poses)} of {len(dataset.images)}",
            f"semantic-sfm dropped_tracks {labeled.dropped}",
        ],
    )
    with _atomic_directory(args.out) as staging:
        write_ply(cloud, os.path.join(staging, "semantic_cloud.ply"),
                  encoding=args.encoding)
        write_report(labeled.points, stats, staging, bins=args.bins)
        save_tracks(filtered.tracks, os.path.join(staging, "tracks.txt"))
        with open(os.path.join(staging, "config.txt"), "w") as f:
            f.write(f"# config_hash {config.config_hash()}\n")
            f.write(config.to_text())
    print(
        f"registered {len(rec.poses)}/{len(dataset.images)} images, "
        f"{len(labeled)} labeled points -> {args.out}"
    )
    return 0


def _load_poses_file(path: str) -> tuple[dict[int, Pose], list[str]]:
    poses: dict[int, Pose] = {}
    names: list[str] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 13:
                raise DatasetError(
                    f"{path} line {lineno}: expected 13 fields, got {len(parts)}"
                )
            vals = [float(x) for x in parts[1:]]
            poses[len(names)] = Pose(np.array(vals[:9]).reshape(3, 3),
                                     np.array(vals[9:]))
            names.append(parts[0])
    return poses, names


def _load_camera_file(path: str) -> CameraIntrinsics:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines or len(lines[0].split()) != 5:
        raise DatasetError(f"malformed camera file: {path}")
    p = lines[0].split()
    return CameraIntrinsics(float(p[0]), float(p[1]), float(p[2]),
                            int(p[3]), int(p[4]))


def cmd_label(args) -> int:
    poses, names = _load_poses_file(args.poses)
    camera_path = args.camera or os.path.join(os.path.dirname(args.poses),
                                              "camera.txt")
    intr = _load_camera_file(camera_path)
    label_images = {}
    for image_id, name in enumerate(names):
        stem = os.path.splitext(name)[0]
        lab_path = os.path.join(args.labels, stem + ".pgm")
        if os.path.isfile(lab_path):
            with open(lab_path, "rb") as f:
                label_images[image_id] = decode_label_raster(f.read(), DEFAULT_PALETTE)
    tracks = ingest_external_cloud(args.visibility, poses, intr, label_images)
    colors = None
    if args.cloud:
        ply = read_ply(args.cloud)
        if len(ply) != len(tracks):
            raise IngestError(
                f"cloud has {len(ply)} points but visibility lists {len(tracks)}"
            )
        colors = [p.color for p in ply.points]
    rec = Reconstruction(intr, poses=poses, tracks=tracks)
    labeled = label_reconstruction(rec, label_images, oob=args.oob_votes)
    if colors is not None:
        for p in labeled.points:
            p.color = colors[p.track_id]
    cloud = PlyCloud(labeled.points,
                     comments=[f"semantic-sfm dropped_tracks {labeled.dropped}"])
    write_ply(cloud, args.out, encoding=args.encoding)
    print(f"labeled {len(labeled)} points ({labeled.dropped} dropped) -> {args.out}")
    return 0


def cmd_filter(args) -> int:
    cloud = read_ply(args.input)
    kept = confidence_filter(cloud.points, args.tau)
    out = PlyCloud(kept, comments=cloud.comments
                   + [f"semantic-sfm confidence_filter tau {args.tau:.6g}"])
    write_ply(out, args.out, encoding=args.encoding)
    print(f"kept {len(kept)} / {len(cloud)} points -> {args.out}")
    return 0


def cmd_report(args) -> int:
    cloud = read_ply(args.input)
    stats = ReconstructionStats(
        registered_images=0,
        total_images=0,
        point_count=len(cloud),
        rms_reprojection_px=float("nan"),
    )
    with _atomic_directory(args.out) as staging:
        write_report(cloud.points, stats, staging, bins=args.bins)
    print(f"report for {len(cloud)} points -> {args.out}")
    return 0


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semsfm",
                     description="Semantic structure-from-motion toolkit")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic labeled survey")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trees", type=int, default=24)
    p.add_argument("--bushes", type=int, default=14)
    p.add_argument("--extent", type=float, default=170.0)
    p.add_argument("--altitude", type=float, default=100.0)
    p.add_argument("--overlap-fwd", type=float, default=0.85)
    p.add_argument("--overlap-side", type=float, default=0.80)
    p.add_argument("--gcps", type=int, default=6)
    p.add_argument("--focal", type=float, default=800.0)
    p.add_argument("--width", type=int, default=800)
    p.add_argument("--height", type=int, default=600)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sfm", help="reconstruct and label a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-semantic-filter", action="store_true",
                   help="disable label-agreement match filtering")
    p.add_argument("--no-gcp", action="store_true",
                   help="skip ground-control alignment")
    p.add_argument("--oob-votes", choices=("clamp", "drop"), default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--encoding", choices=("binary", "ascii"), default="binary")
    p.set_defaults(func=cmd_sfm)

    p = sub.add_parser("label", help="label an externally produced cloud")
    p.add_argument("--cloud", default=None, help="input PLY (colors carried over)")
    p.add_argument("--visibility", required=True,
                   help="per-point 'x y z n img_1..img_n' file")
    p.add_argument("--poses", required=True,
                   help="poses file: image r11..r33 tx ty tz per line")
    p.add_argument("--labels", required=True, help="label raster directory")
    p.add_argument("--camera", default=None,
                   help="camera file (default: camera.txt next to poses)")
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--oob-votes", choices=("clamp", "drop"), default="clamp")
    p.add_argument("--encoding", choices=("binary", "ascii"), default="binary")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("filter", help="keep points at or above a confidence")
    p.add_argument("--in", dest="input", required=True, help="input PLY")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--encoding", choices=("binary", "ascii"), default="binary")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("report", help="histogram + class summary from a PLY")
    p.add_argument("--in", dest="input", required=True, help="input PLY")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        try:
            return int(e.code or 0)
        except (TypeError, ValueError):
            return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except SystemExit as e:  # env-seed parse failure
        message = str(e)
        if message:
            sys.stderr.write(message + "\n")
        return 1
    except ReconstructionError as e:
        sys.stderr.write(f"semsfm: reconstruction failed: {e}\n")
        return 3
    except (DatasetError, IngestError, PlyParseError, LabelDecodeError,
            RasterFormatError, ConfigError, LabelingError, PlacementError,
            FileNotFoundError, IsADirectoryError, NotADirectoryError) as e:
        sys.stderr.write(f"semsfm: {e}\n")
        return 2
    except ValueError as e:
        sys.stderr.write(f"semsfm: invalid parameter: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
