"""Pipeline configuration: every tunable in one flat, hashable record."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .geometry import BAConfig, CameraIntrinsics, RansacParams


@dataclass(frozen=True)
class PipelineConfig:
    # feature matching
    ratio: float = 0.8
    max_features: int = 1600
    min_inlier_fraction: float = 0.15  # semantic filter fallback threshold
    semantic_filter: bool = True
    # geometric estimation
    ransac_threshold_px: float = 1.5
    ransac_iterations: int = 2000
    seed: int = 42
    triangulation_gate_px: float = 4.0
    min_parallax_deg: float = 1.0
    seed_parallax_deg: float = 2.0
    # bundle adjustment
    ba_cadence: int = 3
    ba_max_iterations: int = 50
    ba_tolerance: float = 1e-8
    # point filtering
    filter_reproj_px: float = 4.0
    filter_knn: int = 8
    filter_std: float = 2.0
    # labeling
    oob_votes: str = "clamp"  # clamp: border pixel votes; drop: excluded from I_x
    # camera
    focal: float = 800.0
    width: int = 800
    height: int = 600
    # execution
    threads: int = 0  # 0 = all available cores

    def __post_init__(self):
        for name in ("ratio", "min_inlier_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("ransac_threshold_px", "triangulation_gate_px", "ba_tolerance",
                     "filter_reproj_px", "filter_std", "focal"):
            v = getattr(self, name)
            if v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        for name in ("ransac_iterations", "ba_cadence", "ba_max_iterations",
                     "filter_knn", "max_features", "width", "height"):
            v = getattr(self, name)
            if v < 1:
                raise ValueError(f"{name} must be at least 1, got {v}")
        if self.oob_votes not in ("clamp", "drop"):
            raise ValueError(f"oob_votes must be 'clamp' or 'drop', got {self.oob_votes!r}")
        if self.threads < 0:
            raise ValueError(f"threads must be non-negative, got {self.threads}")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.width / 2.0, self.height / 2.0,
                                self.width, self.height)

    @property
    def ransac(self) -> RansacParams:
        return RansacParams(self.ransac_threshold_px, self.ransac_iterations, self.seed)

    @property
    def ba(self) -> BAConfig:
        return BAConfig(self.ba_max_iterations, self.ba_tolerance)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float):
                lines.append(f"{f.name} = {v:.17g}")
            else:
                lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **kwargs) -> "PipelineConfig":
        return dataclasses.replace(self, **kwargs)


class ConfigError(ValueError):
    """Malformed configuration file."""


def config_from_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse `key = value` lines; unknown keys and bad values are errors."""
    base = base or PipelineConfig()
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown option {key!r}")
        ftype = fields[key].type
        try:
            if ftype == "bool" or isinstance(getattr(base, key), bool):
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(value)
                overrides[key] = value.lower() in ("true", "1")
            elif isinstance(getattr(base, key), int):
                overrides[key] = int(value)
            elif isinstance(getattr(base, key), float):
                overrides[key] = float(value)
            else:
                overrides[key] = value
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    try:
        return base.replace(**overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from None
