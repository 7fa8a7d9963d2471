"""Semantic structure-from-motion: labeled aerial surveys to labeled clouds.

Reconstructs a sparse 3D point cloud from overlapping nadir images whose
per-pixel semantic labels are known, filters feature matches by label
agreement, votes a class and confidence for every 3D point, and exports a
labeled PLY. A procedural forest scene generator provides ground-truthed
synthetic surveys for end-to-end evaluation.
"""

from .config import PipelineConfig, config_from_text
from .features import Feature, MatchSet, detect_features, match_pair, semantic_filter
from .geometry import (
    BAConfig,
    CameraIntrinsics,
    Observation,
    Pose,
    RansacParams,
    align_to_gcps,
    bundle_adjust,
    estimate_relative_pose,
    project,
    resect,
    similarity_transform,
    triangulate,
)
from .imaging import (
    CANOPY,
    DEFAULT_PALETTE,
    GCP_MARKER,
    GROUND,
    TRUNK,
    UNDERSTOREY,
    UNLABELED,
    LabelImage,
    LabelPalette,
    label_at,
)
from .io import PlyCloud, read_ply, write_ply, write_report
from .reconstruct import (
    Reconstruction,
    Track,
    build_tracks,
    filter_points,
    ingest_external_cloud,
    run_sfm,
)
from .scene import (
    Dataset,
    GroundControlPoint,
    SceneParams,
    SurveyPlan,
    export_dataset,
    generate_scene,
    load_dataset,
    place_gcps,
    plan_survey,
    render_frame,
)
from .semantics import (
    LabeledPoint,
    confidence_filter,
    confidence_histogram,
    label_reconstruction,
    point_confidence,
    point_label,
)

__version__ = "0.1.0"
