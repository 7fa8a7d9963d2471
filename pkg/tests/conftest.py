"""Shared fixtures: one small rendered survey reused across test modules.

The full-resolution protocol lives in test_acceptance; everything else runs
on a reduced 400x300 survey so the suite stays fast.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from semsfm.config import PipelineConfig
from semsfm.scene import (
    Dataset,
    GroundControlPoint,
    RenderedFrame,
    SceneDescription,
    SceneParams,
    SurveyPlan,
    fill_gcp_observations,
    generate_scene,
    place_gcps,
    plan_survey,
    render_frame,
)


@dataclass
class SurveyFixture:
    config: PipelineConfig
    params: SceneParams
    scene: SceneDescription
    plan: SurveyPlan
    frames: list[RenderedFrame]
    gcps: list[GroundControlPoint]
    dataset: Dataset


@pytest.fixture(scope="session")
def small_survey() -> SurveyFixture:
    """Ten 400x300 frames over a 120 m scene with 10 trees and 4 markers."""
    config = PipelineConfig(focal=400.0, width=400, height=300, max_features=900)
    params = SceneParams(extent=120.0, tree_count=10, bush_count=6)
    scene = generate_scene(5, params)
    gcps = place_gcps(scene, 4, 6)
    plan = plan_survey(scene, 100.0, 0.85, 0.80, config.intrinsics)
    frames = [render_frame(scene, p, config.intrinsics, i)
              for i, p in enumerate(plan.poses)]
    fill_gcp_observations(gcps, {f.image_id: f.true_pose for f in frames},
                          config.intrinsics, scene)
    usable = [g for g in gcps if len(g.observations) >= 2]
    dataset = Dataset(
        intrinsics=config.intrinsics,
        images={f.image_id: f.rgb for f in frames},
        labels={f.image_id: f.labels for f in frames},
        image_names={f.image_id: f"{f.image_id:04d}.ppm" for f in frames},
        gcps=usable,
        poses_gt={f.image_id: f.true_pose for f in frames},
    )
    return SurveyFixture(config, params, scene, plan, frames, gcps, dataset)


@pytest.fixture(scope="session")
def small_reconstruction(small_survey):
    """The small survey pushed through the full pipeline once."""
    from semsfm.reconstruct import run_sfm

    return run_sfm(small_survey.dataset, small_survey.config)
