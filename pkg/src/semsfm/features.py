"""Corner features, descriptor matching, and label-agreement match filtering.

The detector is a plain Harris corner finder with normalized 8x8 intensity
patches as descriptors. It is deliberately simple: the survey geometry is
nadir with a fixed camera orientation, so patches need no rotation or scale
handling. Matching is mutual nearest neighbor with a Lowe-style ratio test.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .imaging import LabelImage, label_at

PATCH = 8  # descriptor patch edge, pixels
_BORDER = PATCH // 2  # keypoints closer than this to an edge are dropped


@dataclass(frozen=True)
class Feature:
    index: int
    uv: tuple[float, float]
    descriptor: np.ndarray  # unit-norm, mean-subtracted patch intensities
    label: int
    response: float = 0.0


@dataclass(frozen=True)
class MatchSet:
    pair: tuple[int, int]
    matches: tuple[tuple[int, int, float], ...]  # (index in i, index in j, distance)
    semantic_filter_applied: bool = False

    def __len__(self) -> int:
        return len(self.matches)


def grayscale(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def harris_response(gray: np.ndarray, sigma: float = 1.5, k: float = 0.05) -> np.ndarray:
    gy, gx = np.gradient(gray)
    Ixx = ndimage.gaussian_filter(gx * gx, sigma)
    Iyy = ndimage.gaussian_filter(gy * gy, sigma)
    Ixy = ndimage.gaussian_filter(gx * gy, sigma)
    det = Ixx * Iyy - Ixy * Ixy
    trace = Ixx + Iyy
    return det - k * trace * trace


def _subpixel_offset(values: np.ndarray, center: int) -> float:
    """Parabolic peak refinement along one axis; offset clipped to [-0.5, 0.5]."""
    a = values[center - 1]
    b = values[center]
    c = values[center + 1]
    denom = a - 2.0 * b + c
    if abs(denom) < 1e-12:
        return 0.0
    return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))


def detect_features(rgb: np.ndarray, labels: LabelImage, max_count: int = 1600,
                    nms_radius: int = 3, rel_threshold: float = 1e-5) -> list[Feature]:
    """Harris corners with normalized 8x8 patch descriptors.

    Keeps the `max_count` strongest responses after non-maximum suppression
    over a (2*nms_radius+1) square window. A uniform image yields an empty
    list. Each feature's label is sampled from the label image at its pixel.
    """
    gray = grayscale(rgb)
    resp = harris_response(gray)
    peak = float(resp.max(initial=0.0))
    if peak <= 0.0:
        return []
    local_max = resp == ndimage.maximum_filter(resp, size=2 * nms_radius + 1)
    candidate = local_max & (resp > rel_threshold * peak)
    h, w = gray.shape
    candidate[: _BORDER, :] = False
    candidate[h - _BORDER :, :] = False
    candidate[:, : _BORDER] = False
    candidate[:, w - _BORDER :] = False
    rows, cols = np.nonzero(candidate)
    if len(rows) == 0:
        return []
    # Strongest first; ties broken by raster order so output is deterministic.
    order = np.lexsort((cols, rows, -resp[rows, cols]))
    rows, cols = rows[order], cols[order]

    feats: list[Feature] = []
    for r, c in zip(rows, cols):
        if len(feats) >= max_count:
            break
        patch = gray[r - _BORDER : r + _BORDER, c - _BORDER : c + _BORDER]
        d = patch.ravel() - patch.mean()
        norm = np.linalg.norm(d)
        if norm < 1e-9:
            continue
        du = _subpixel_offset(resp[r, c - 1 : c + 2], 1) if 0 < c < w - 1 else 0.0
        dv = _subpixel_offset(resp[r - 1 : r + 2, c], 1) if 0 < r < h - 1 else 0.0
        uv = (float(c) + du, float(r) + dv)
        feats.append(
            Feature(
                index=len(feats),
                uv=uv,
                descriptor=d / norm,
                label=label_at(labels, uv[0], uv[1]),
                response=float(resp[r, c]),
            )
        )
    return feats


def match_pair(feats_i: list[Feature], feats_j: list[Feature],
               ratio: float = 0.8, pair: tuple[int, int] = (0, 0)) -> MatchSet:
    """Mutual nearest-neighbor descriptor matching with a ratio test.

    A match survives when each feature is the other's nearest neighbor and,
    where a second neighbor exists on the query side, best < ratio * second.
    """
    if not feats_i or not feats_j:
        return MatchSet(pair, ())
    di = np.stack([f.descriptor for f in feats_i])
    dj = np.stack([f.descriptor for f in feats_j])
    # Euclidean distances via the gram matrix: one BLAS call per pair.
    sq = (di * di).sum(axis=1)[:, None] + (dj * dj).sum(axis=1)[None, :] - 2.0 * di @ dj.T
    d = np.sqrt(np.maximum(sq, 0.0))
    nn_ij = d.argmin(axis=1)
    nn_ji = d.argmin(axis=0)
    out = []
    for a, b in enumerate(nn_ij):
        if nn_ji[b] != a:
            continue
        best = d[a, b]
        if d.shape[1] >= 2:
            second = np.partition(d[a], 1)[1]
            if not best < ratio * second:
                continue
        out.append((a, int(b), float(best)))
    return MatchSet(pair, tuple(out))


def semantic_filter(ms: MatchSet, feats_i: list[Feature], feats_j: list[Feature],
                    min_inlier_fraction: float = 0.15) -> MatchSet:
    """Drop matches whose endpoints carry different class labels.

    The label-agreeing subset replaces the match list only when it makes up
    at least `min_inlier_fraction` of the input; below that the labels are
    treated as unreliable for this pair and every match is kept, with
    semantic_filter_applied left false.
    """
    if not ms.matches:
        return replace(ms, semantic_filter_applied=False)
    agreeing = tuple(
        m for m in ms.matches if feats_i[m[0]].label == feats_j[m[1]].label
    )
    if len(agreeing) / len(ms.matches) >= min_inlier_fraction:
        return MatchSet(ms.pair, agreeing, semantic_filter_applied=True)
    return replace(ms, semantic_filter_applied=False)


def match_debug_rows(ms_raw: MatchSet, ms_kept: MatchSet,
                     feats_i: list[Feature], feats_j: list[Feature]) -> list[str]:
    """CSV rows `pair_i,pair_j,idx_i,idx_j,dist,label_i,label_j,kept` for one pair."""
    kept = {(a, b) for a, b, _ in ms_kept.matches}
    i, j = ms_raw.pair
    rows = []
    for a, b, dist in ms_raw.matches:
        rows.append(
            f"{i},{j},{a},{b},{dist:.6g},{feats_i[a].label},{feats_j[b].label},"
            f"{int((a, b) in kept)}"
        )
    return rows
