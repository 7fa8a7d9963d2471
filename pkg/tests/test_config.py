"""Configuration record: defaults, validation, text round-trip, hashing."""
from __future__ import annotations

import pytest

from semsfm.config import ConfigError, PipelineConfig, config_from_text


class TestDefaults:
    def test_documented_defaults(self):
        cfg = PipelineConfig()
        assert cfg.ratio == 0.8
        assert cfg.min_inlier_fraction == 0.15
        assert cfg.semantic_filter is True
        assert cfg.ransac_threshold_px == 1.5
        assert cfg.ransac_iterations == 2000
        assert cfg.seed == 42
        assert cfg.triangulation_gate_px == 4.0
        assert cfg.ba_cadence == 3
        assert cfg.ba_max_iterations == 50
        assert cfg.ba_tolerance == 1e-8
        assert cfg.filter_knn == 8
        assert cfg.filter_std == 2.0
        assert cfg.oob_votes == "clamp"
        assert cfg.focal == 800.0
        assert (cfg.width, cfg.height) == (800, 600)

    def test_intrinsics_principal_point_centered(self):
        intr = PipelineConfig().intrinsics
        assert (intr.cx, intr.cy) == (400.0, 300.0)
        assert (intr.width, intr.height) == (800, 600)
        assert intr.focal == 800.0

    def test_replace_returns_new_frozen_instance(self):
        cfg = PipelineConfig()
        other = cfg.replace(ratio=0.7)
        assert other.ratio == 0.7 and cfg.ratio == 0.8
        with pytest.raises(Exception):
            cfg.ratio = 0.5


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(ratio=1.5),
        dict(ratio=-0.1),
        dict(min_inlier_fraction=2.0),
        dict(ransac_threshold_px=0.0),
        dict(ransac_iterations=0),
        dict(triangulation_gate_px=-1.0),
        dict(ba_cadence=0),
        dict(ba_tolerance=0.0),
        dict(filter_knn=0),
        dict(filter_std=0.0),
        dict(focal=0.0),
        dict(width=0),
        dict(oob_votes="sometimes"),
        dict(threads=-1),
    ])
    def test_out_of_range_rejected(self, kwargs):
        with pytest.raises(ValueError):
            PipelineConfig(**kwargs)

    def test_boundary_fractions_allowed(self):
        PipelineConfig(ratio=0.0, min_inlier_fraction=0.0)
        PipelineConfig(ratio=1.0, min_inlier_fraction=1.0)


class TestTextFormat:
    def test_round_trip_identity(self):
        cfg = PipelineConfig(ratio=0.75, seed=7, oob_votes="drop", focal=512.0)
        assert config_from_text(cfg.to_text()) == cfg

    def test_defaults_preserved_for_missing_keys(self):
        cfg = config_from_text("ratio = 0.6\n")
        assert cfg.ratio == 0.6
        assert cfg.seed == PipelineConfig().seed

    def test_comments_and_blanks_ignored(self):
        cfg = config_from_text("# a comment\n\nseed = 9  # trailing\n")
        assert cfg.seed == 9

    def test_bool_spellings(self):
        assert config_from_text("semantic_filter = false").semantic_filter is False
        assert config_from_text("semantic_filter = 1").semantic_filter is True
        with pytest.raises(ConfigError, match="bad value"):
            config_from_text("semantic_filter = maybe")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown option"):
            config_from_text("warp_factor = 9\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="line 1"):
            config_from_text("just words\n")

    def test_bad_numeric_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            config_from_text("ransac_iterations = soon\n")

    def test_out_of_range_value_surfaces_as_config_error(self):
        with pytest.raises(ConfigError, match="ratio"):
            config_from_text("ratio = 3.0\n")


class TestHash:
    def test_hash_stable_for_equal_configs(self):
        assert PipelineConfig().config_hash() == PipelineConfig().config_hash()

    def test_hash_changes_with_any_field(self):
        base = PipelineConfig()
        assert base.config_hash() != base.replace(seed=43).config_hash()
        assert base.config_hash() != base.replace(ratio=0.81).config_hash()

    def test_hash_short_hex(self):
        h = PipelineConfig().config_hash()
        assert len(h) == 16
        int(h, 16)
