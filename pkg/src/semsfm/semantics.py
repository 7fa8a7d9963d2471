"""Point labeling by majority vote over the images that track each point.

A reconstructed point inherits the modal class of the labels sampled at its
fresh reprojections (not the pixels where it was originally detected; the
two differ once optimization moves the point). Confidence is the fraction of
views agreeing with the mode, so it lives in (0, 1] and hits 1 exactly on
unanimity. Ties on the mode break toward the smallest class id, which keeps
results deterministic; a tie is always visible as confidence <= 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import LabelImage, LabelPalette, label_at, in_bounds

MAX_CLASS_ID = 255


class NoVisibilityError(ValueError):
    """A label vote was requested for a point with no observing images."""


class LabelingError(RuntimeError):
    """Missing rasters or inconsistent inputs during labeling."""


@dataclass
class LabeledPoint:
    position: np.ndarray
    color: tuple[int, int, int]
    label: int
    confidence: float
    views: int
    track_id: int = -1


def point_label(obs_labels) -> int:
    """Modal class id; ties break toward the smallest id."""
    labels = np.asarray(obs_labels, dtype=np.int64)
    if labels.size == 0:
        raise NoVisibilityError("cannot vote with zero observations")
    counts = np.bincount(labels, minlength=1)
    return int(counts.argmax())  # argmax returns the first (smallest) maximum


def point_confidence(obs_labels, chosen: int) -> float:
    """Fraction of observations whose label equals the chosen mode."""
    labels = np.asarray(obs_labels, dtype=np.int64)
    if labels.size == 0:
        raise NoVisibilityError("cannot vote with zero observations")
    return float((labels == chosen).sum() / labels.size)


@dataclass
class LabelingResult:
    points: list[LabeledPoint] = field(default_factory=list)
    dropped: int = 0  # tracks with no usable reprojection (behind camera / oob)

    def __iter__(self):
        return iter(self.points)

    def __len__(self) -> int:
        return len(self.points)


def label_reconstruction(rec, label_images: dict[int, LabelImage],
                         rgb_images: dict[int, np.ndarray] | None = None,
                         oob: str = "clamp") -> LabelingResult:
    """Vote a label and confidence for every triangulated track.

    Each track's point is reprojected into every posed image that tracked
    it; the label raster is sampled at that fresh projection. Behind-camera
    projections never vote. Out-of-frame projections follow `oob`: "clamp"
    samples the border pixel, "drop" removes the view from the vote. Colors
    are the per-channel mean of the RGB samples when `rgb_images` is given,
    mid-gray otherwise. Tracks that end up with zero votes are dropped and
    counted.
    """
    if oob not in ("clamp", "drop"):
        raise ValueError(f"oob must be 'clamp' or 'drop', got {oob!r}")
    intr = rec.intrinsics
    result = LabelingResult()
    for t in rec.triangulated():
        votes = []
        rgb_sum = np.zeros(3)
        rgb_n = 0
        for o in t.observations:
            pose = rec.poses.get(o.image_id)
            if pose is None:
                continue
            if o.image_id not in label_images:
                raise LabelingError(
                    f"no label raster for image {o.image_id} observed by "
                    f"track {t.track_id}"
                )
            q = pose.R @ t.point + pose.t
            if q[2] <= 0:
                continue
            u = intr.focal * q[0] / q[2] + intr.cx
            v = intr.focal * q[1] / q[2] + intr.cy
            img = label_images[o.image_id]
            if oob == "drop" and not in_bounds(img, u, v):
                continue
            votes.append(label_at(img, u, v))
            if rgb_images is not None:
                rgb = rgb_images[o.image_id]
                col = min(max(int(np.floor(u + 0.5)), 0), rgb.shape[1] - 1)
                row = min(max(int(np.floor(v + 0.5)), 0), rgb.shape[0] - 1)
                rgb_sum += rgb[row, col]
                rgb_n += 1
        if not votes:
            result.dropped += 1
            continue
        label = point_label(votes)
        conf = point_confidence(votes, label)
        if rgb_n:
            color = tuple(int(round(c)) for c in rgb_sum / rgb_n)
        else:
            color = (128, 128, 128)
        result.points.append(
            LabeledPoint(np.asarray(t.point, dtype=np.float64), color, label,
                         conf, len(votes), t.track_id)
        )
    return result


def confidence_filter(cloud: list[LabeledPoint], tau: float) -> list[LabeledPoint]:
    """Keep points with confidence >= tau, preserving order."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return [p for p in cloud if p.confidence >= tau]


def confidence_histogram(cloud: list[LabeledPoint], bins: int
                         ) -> list[tuple[tuple[float, float], int]]:
    """Uniform bins over (0, 1], right-inclusive, so confidence 1 lands last.

    Counts always sum to the cloud size: confidences are in (0, 1] by
    construction.
    """
    if bins < 1:
        raise ValueError("bin count must be at least 1")
    edges = np.linspace(0.0, 1.0, bins + 1)
    conf = np.array([p.confidence for p in cloud], dtype=np.float64)
    counts = np.zeros(bins, dtype=np.int64)
    if len(conf):
        idx = np.searchsorted(edges, conf, side="left") - 1
        idx = np.clip(idx, 0, bins - 1)
        counts = np.bincount(idx, minlength=bins)
    return [((float(edges[k]), float(edges[k + 1])), int(counts[k]))
            for k in range(bins)]


def class_summary(cloud: list[LabeledPoint], palette: LabelPalette
                  ) -> list[tuple[int, str, int, float]]:
    """(class id, name, point count, mean confidence) for classes present."""
    by_class: dict[int, list[float]] = {}
    for p in cloud:
        by_class.setdefault(p.label, []).append(p.confidence)
    out = []
    for cls in sorted(by_class):
        confs = by_class[cls]
        name = palette.entry(cls).name if palette.has_class(cls) else f"class-{cls}"
        out.append((cls, name, len(confs), float(np.mean(confs))))
    return out
