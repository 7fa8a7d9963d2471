"""Pinhole camera model and multi-view geometry solvers.

Conventions: poses are world->camera, x_cam = R @ x_world + t. Pixel u is the
column, v the row; projection is distortion-free pinhole with square pixels.
Relative poses map camera-i coordinates into camera-j: x_j = R @ x_i + t.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """Non-finite cost encountered during optimization."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def K(self) -> np.ndarray:
        return np.array(
            [[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass
class Pose:
    """World->camera rigid transform."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def copy(self) -> "Pose":
        return Pose(self.R.copy(), self.t.copy())

    def orthonormality_residual(self) -> float:
        return float(np.abs(self.R @ self.R.T - np.eye(3)).max())


@dataclass(frozen=True)
class Observation:
    image_id: int
    uv: tuple[float, float]
    label: int = 0


@dataclass
class RansacParams:
    threshold_px: float = 1.5
    iterations: int = 2000
    seed: int = 42
    min_inliers: int = 15


# --- rotations ------------------------------------------------------------

def skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = w / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotation_angle_deg(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# --- projection -----------------------------------------------------------

def project(point: np.ndarray, pose: Pose, intr: CameraIntrinsics):
    """Project a world point; returns (u, v) or None when behind the camera."""
    q = pose.R @ np.asarray(point, dtype=np.float64) + pose.t
    if q[2] <= 0.0:
        return None
    u = intr.focal * q[0] / q[2] + intr.cx
    v = intr.focal * q[1] / q[2] + intr.cy
    return (float(u), float(v))


def project_many(points: np.ndarray, pose: Pose, intr: CameraIntrinsics):
    """Vectorized projection; returns (uv (n,2), depth (n,)), uv is NaN behind camera."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = pts @ pose.R.T + pose.t
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.empty((len(pts), 2))
        uv[:, 0] = intr.focal * q[:, 0] / z + intr.cx
        uv[:, 1] = intr.focal * q[:, 1] / z + intr.cy
    uv[z <= 0.0] = np.nan
    return uv, z


def normalized_coords(uv: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(uv)
    out[:, 0] = (uv[:, 0] - intr.cx) / intr.focal
    out[:, 1] = (uv[:, 1] - intr.cy) / intr.focal
    return out


# --- essential matrix / relative pose --------------------------------------

def _hartley_normalize(x: np.ndarray):
    centroid = x.mean(axis=0)
    d = np.linalg.norm(x - centroid, axis=1).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )
    xn = (x - centroid) * s
    return xn, T


def eight_point_essential(x1: np.ndarray, x2: np.ndarray) -> np.ndarray | None:
    """Normalized 8-point estimate of E from >= 8 normalized-coordinate pairs.

    Satisfies x2_h^T E x1_h = 0; the rank-2 (1,1,0) spectrum is enforced.
    """
    a1, T1 = _hartley_normalize(x1)
    a2, T2 = _hartley_normalize(x2)
    A = np.column_stack(
        [
            a2[:, 0] * a1[:, 0],
            a2[:, 0] * a1[:, 1],
            a2[:, 0],
            a2[:, 1] * a1[:, 0],
            a2[:, 1] * a1[:, 1],
            a2[:, 1],
            a1[:, 0],
            a1[:, 1],
            np.ones(len(a1)),
        ]
    )
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if len(s) >= 2 and s[-2] < 1e-10 * max(s[0], 1e-300):
        return None  # degenerate configuration, nullspace dim > 1
    F = Vt[-1].reshape(3, 3)
    U, sv, Vt = np.linalg.svd(F)
    F = U @ np.diag([sv[0], sv[1], 0.0]) @ Vt  # rank 2 in the normalized frame
    E = T2.T @ F @ T1
    # the (1,1,0) essential spectrum only holds in calibrated coordinates,
    # so project after undoing the normalization
    U, sv, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def sampson_distance(E: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """First-order geometric distance (normalized-coordinate units)."""
    n = len(x1)
    x1h = np.column_stack([x1, np.ones(n)])
    x2h = np.column_stack([x2, np.ones(n)])
    Ex1 = x1h @ E.T
    Etx2 = x2h @ E
    num = np.einsum("ij,ij->i", x2h, Ex1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def decompose_essential(E: np.ndarray):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def _triangulate_pair_fast(R: np.ndarray, t: np.ndarray, x1: np.ndarray, x2: np.ndarray):
    """Midpoint-free DLT for P1=[I|0], P2=[R|t]; returns points and both depths."""
    n = len(x1)
    pts = np.empty((n, 3))
    P2 = np.hstack([R, t.reshape(3, 1)])
    for i in range(n):
        A = np.empty((4, 4))
        A[0] = [-1.0, 0.0, x1[i, 0], 0.0]
        A[1] = [0.0, -1.0, x1[i, 1], 0.0]
        A[2] = x2[i, 0] * P2[2] - P2[0]
        A[3] = x2[i, 1] * P2[2] - P2[1]
        _, _, Vt = np.linalg.svd(A)
        X = Vt[-1]
        w = X[3] if abs(X[3]) > 1e-15 else 1e-15
        pts[i] = X[:3] / w
    z1 = pts[:, 2]
    z2 = pts @ R[2] + t[2]
    return pts, z1, z2


def _ransac_iteration_bound(inlier_ratio: float, sample_size: int, confidence: float = 0.9999) -> int:
    eps = min(max(inlier_ratio, 1e-6), 1.0 - 1e-12)
    denom = np.log(max(1.0 - eps**sample_size, 1e-300))
    if denom >= 0.0:  # 1 - eps**s rounds to 1.0: bound is effectively unlimited
        return np.iinfo(np.int64).max
    return int(np.ceil(np.log(1.0 - confidence) / denom))


def _grow_consensus(E: np.ndarray, x1: np.ndarray, x2: np.ndarray,
                    mask: np.ndarray, count: int, thresh: float):
    """Refit on the consensus set and recollect until support stops growing.

    A minimal-sample essential matrix is noise-limited and often captures
    only part of the true consensus; each least-squares refit over the
    current inliers strictly grows the set or terminates, so the loop ends
    after at most n rounds. Returns (E, mask, count) with the invariant
    that `mask` is exactly the support of `E`: a refit whose recollected
    support shrinks is discarded, not returned.
    """
    while True:
        refit = eight_point_essential(x1[mask], x2[mask])
        if refit is None:
            return E, mask, count
        refined = sampson_distance(refit, x1, x2) < thresh
        refined_count = int(refined.sum())
        if refined_count <= count:
            return E, mask, count
        E, mask, count = refit, refined, refined_count


def estimate_relative_pose(ms, feats_i, feats_j, intr: CameraIntrinsics,
                           ransac: RansacParams | None = None):
    """RANSAC essential-matrix pose for a matched image pair.

    Thin adapter over `estimate_relative_pose_px`: pulls pixel coordinates
    out of the match set. Returns (Pose of j in i's frame, inlier mask over
    ms.matches) or None when the pair is rejected.
    """
    uv1 = np.array([feats_i[a].uv for a, _, _ in ms.matches], dtype=np.float64).reshape(-1, 2)
    uv2 = np.array([feats_j[b].uv for _, b, _ in ms.matches], dtype=np.float64).reshape(-1, 2)
    return estimate_relative_pose_px(uv1, uv2, intr, ransac)


def estimate_relative_pose_px(uv1: np.ndarray, uv2: np.ndarray, intr: CameraIntrinsics,
                              ransac: RansacParams | None = None):
    """RANSAC 8-point essential estimation and cheirality disambiguation.

    `uv1`/`uv2` are matched (n, 2) pixel arrays from the first and second
    image. Returns (Pose of the second camera in the first camera's frame
    with unit-norm translation, inlier mask), or None when the pair is
    rejected (< 8 matches, degenerate geometry, or fewer than
    `ransac.min_inliers` supporting the best model).
    """
    ransac = ransac or RansacParams()
    uv1 = np.asarray(uv1, dtype=np.float64).reshape(-1, 2)
    uv2 = np.asarray(uv2, dtype=np.float64).reshape(-1, 2)
    if len(uv1) < 8:
        return None
    # Degenerate input guard: the points must span at least 8 distinct spots.
    if len(np.unique(np.round(uv1, 6), axis=0)) < 8 or len(np.unique(np.round(uv2, 6), axis=0)) < 8:
        return None
    x1 = normalized_coords(uv1, intr)
    x2 = normalized_coords(uv2, intr)
    thresh = ransac.threshold_px / intr.focal

    rng = np.random.default_rng(ransac.seed)
    n = len(uv1)
    best_E = None
    best_mask = None
    best_count = 0
    max_iters = ransac.iterations
    it = 0
    while it < max_iters:
        it += 1
        idx = rng.choice(n, size=8, replace=False)
        E = eight_point_essential(x1[idx], x2[idx])
        if E is None:
            continue
        d = sampson_distance(E, x1, x2)
        mask = d < thresh
        count = int(mask.sum())
        # Grow every viable hypothesis: repeated surface texture yields
        # coherent wrong-match clusters, so a minimal sample's raw support
        # does not predict where its consensus tops out. Growth is one or
        # two refits for most hypotheses and the adaptive bound below ends
        # the search quickly once a strong consensus has been grown.
        if count >= 8:
            E, mask, count = _grow_consensus(E, x1, x2, mask, count, thresh)
        if count > best_count:
            best_E = E
            best_mask = mask
            best_count = count
            max_iters = min(ransac.iterations,
                            _ransac_iteration_bound(count / n, 8))
    if best_mask is None or best_count < max(ransac.min_inliers, 8):
        return None
    mask = best_mask

    # Cheirality: pick the decomposition with most points in front of both cameras.
    xi, xj = x1[mask], x2[mask]
    best_pose = None
    best_front = -1
    for R, t in decompose_essential(best_E):
        pts, z1, z2 = _triangulate_pair_fast(R, t, xi, xj)
        front = int(((z1 > 0) & (z2 > 0)).sum())
        if front > best_front:
            best_front = front
            best_pose = Pose(R, t / np.linalg.norm(t))
    if best_pose is None or best_front < max(ransac.min_inliers, 8) // 2:
        return None
    return best_pose, mask


# --- triangulation ----------------------------------------------------------

def triangulate(obs: list[tuple[Observation, Pose]], intr: CameraIntrinsics,
                reproj_gate_px: float = 4.0, min_parallax_deg: float = 1.0):
    """Multi-view linear (DLT) triangulation with quality gates.

    Returns (point, "ok") on success, else (None, reason) with reason one of
    "too_few_views", "low_parallax", "behind_camera", "high_reprojection".
    """
    if len(obs) < 2:
        return None, "too_few_views"
    A = np.empty((2 * len(obs), 4))
    for k, (o, pose) in enumerate(obs):
        x, y = normalized_coords(np.array(o.uv), intr)[0]
        P = np.hstack([pose.R, pose.t.reshape(3, 1)])
        A[2 * k] = x * P[2] - P[0]
        A[2 * k + 1] = y * P[2] - P[1]
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-15:
        return None, "low_parallax"
    X = X[:3] / X[3]

    centers = np.array([pose.center() for _, pose in obs])
    rays = centers - X
    norms = np.linalg.norm(rays, axis=1)
    if (norms < 1e-12).any():
        return None, "low_parallax"
    rays = rays / norms[:, None]
    max_angle = 0.0
    for a in range(len(obs)):
        cosang = np.clip(rays[a + 1 :] @ rays[a], -1.0, 1.0)
        if len(cosang):
            max_angle = max(max_angle, float(np.degrees(np.arccos(cosang)).max()))
    if max_angle < min_parallax_deg:
        return None, "low_parallax"

    for o, pose in obs:
        q = pose.R @ X + pose.t
        if q[2] <= 0:
            return None, "behind_camera"
        u = intr.focal * q[0] / q[2] + intr.cx
        v = intr.focal * q[1] / q[2] + intr.cy
        if np.hypot(u - o.uv[0], v - o.uv[1]) > reproj_gate_px:
            return None, "high_reprojection"
    return X, "ok"


# --- resection --------------------------------------------------------------

def _p3p_candidates(Xw: np.ndarray, f: np.ndarray) -> list[Pose]:
    """Grunert's three-point resection.

    `Xw` is (3, 3) world points and `f` (3, 3) unit bearing vectors in the
    camera frame. The law of cosines ties the three unknown camera-frame
    distances to the triangle's side lengths; eliminating two of them leaves
    a quartic, and each admissible root maps the triangle into the camera
    frame, where a rigid Procrustes fit yields the pose. Returns up to four
    candidates; degenerate triples yield an empty list. Being a calibrated
    solver it stays well posed for coplanar points, where a projective DLT
    has an ambiguous nullspace.
    """
    P1, P2, P3 = Xw
    a2 = float(np.sum((P2 - P3) ** 2))
    b2 = float(np.sum((P1 - P3) ** 2))
    c2 = float(np.sum((P1 - P2) ** 2))
    if min(a2, b2, c2) < 1e-18:
        return []
    # Collinear world points leave the pose free to spin about their line.
    if np.sum(np.cross(P2 - P1, P3 - P1) ** 2) < 1e-16 * c2 * b2:
        return []
    ca = float(f[1] @ f[2])  # bearing angle opposite side a
    cb = float(f[0] @ f[2])  # opposite side b
    cg = float(f[0] @ f[1])  # opposite side c
    # With distances s1, s2 = u s1, s3 = v s1 the law of cosines reads
    #   a2 = s1^2 (u^2 + v^2 - 2 u v ca)
    #   b2 = s1^2 (1  + v^2 - 2 v   cb)
    #   c2 = s1^2 (1  + u^2 - 2 u   cg)
    # Dividing out s1^2 and subtracting the equations makes u a rational
    # function N(v)/D(v); substituting it back gives a quartic in v.
    pol = np.polynomial.polynomial
    q = np.array([1.0, -2.0 * cb, 1.0])
    N = np.array([-b2, 0.0, b2]) - (a2 - c2) * q
    D = np.array([-2.0 * b2 * cg, 2.0 * b2 * ca])
    DD = pol.polymul(D, D)
    quartic = pol.polysub(pol.polymul(c2 * q, DD), b2 * DD)
    quartic = pol.polysub(quartic, b2 * pol.polymul(N, N))
    quartic = pol.polyadd(quartic, 2.0 * b2 * cg * pol.polymul(N, D))
    top = np.max(np.abs(quartic))
    if not np.isfinite(top) or top < 1e-300:
        return []
    coeffs = pol.polytrim(quartic / top, 1e-14)
    if len(coeffs) < 2:
        return []
    poses = []
    for root in pol.polyroots(coeffs):
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        if v <= 1e-12:
            continue
        Dv = float(pol.polyval(v, D))
        if abs(Dv) < 1e-12 * b2:
            continue
        u = float(pol.polyval(v, N)) / Dv
        den = float(pol.polyval(v, q))
        if u <= 1e-12 or den <= 1e-18:
            continue
        s1 = np.sqrt(b2 / den)
        Xc = np.array([s1 * f[0], u * s1 * f[1], v * s1 * f[2]])
        cw = Xw.mean(axis=0)
        cc = Xc.mean(axis=0)
        B = (Xc - cc).T @ (Xw - cw)
        U, _, Vt = np.linalg.svd(B)
        d = np.sign(np.linalg.det(U @ Vt)) or 1.0
        R = U @ np.diag([1.0, 1.0, d]) @ Vt
        poses.append(Pose(R, cc - R @ cw))
    return poses


def refine_pose(pose: Pose, Xw: np.ndarray, uv: np.ndarray, intr: CameraIntrinsics,
                iterations: int = 20, tol: float = 1e-10) -> Pose:
    """Levenberg-Marquardt pose-only refinement on reprojection error."""
    R = pose.R.copy()
    t = pose.t.copy()
    lam = 1e-3

    def residuals(Rc, tc):
        q = Xw @ Rc.T + tc
        z = q[:, 2]
        if (z <= 1e-12).any():
            return None, None
        pred = np.column_stack(
            [intr.focal * q[:, 0] / z + intr.cx, intr.focal * q[:, 1] / z + intr.cy]
        )
        return (pred - uv).ravel(), q

    r, q = residuals(R, t)
    if r is None:
        return Pose(R, t)
    cost = float(r @ r)
    for _ in range(iterations):
        z = q[:, 2]
        f = intr.focal
        n = len(Xw)
        dproj = np.zeros((n, 2, 3))
        dproj[:, 0, 0] = f / z
        dproj[:, 0, 2] = -f * q[:, 0] / z**2
        dproj[:, 1, 1] = f / z
        dproj[:, 1, 2] = -f * q[:, 1] / z**2
        RX = q - t
        dq = np.zeros((n, 3, 6))
        dq[:, 0, 1] = RX[:, 2]
        dq[:, 0, 2] = -RX[:, 1]
        dq[:, 1, 0] = -RX[:, 2]
        dq[:, 1, 2] = RX[:, 0]
        dq[:, 2, 0] = RX[:, 1]
        dq[:, 2, 1] = -RX[:, 0]
        dq[:, :, 3:] = np.eye(3)
        J = np.einsum("nij,njk->nik", dproj, dq).reshape(2 * n, 6)
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            R_new = so3_exp(delta[:3]) @ R
            t_new = t + delta[3:]
            r_new, q_new = residuals(R_new, t_new)
            if r_new is not None and float(r_new @ r_new) < cost:
                R, t, r, q = R_new, t_new, r_new, q_new
                cost = float(r_new @ r_new)
                lam = max(lam / 3, 1e-9)
                improved = True
                break
            lam *= 10
        if not improved or np.linalg.norm(g) < tol:
            break
    return Pose(R, t)


def resect(points3d: np.ndarray, pixels: np.ndarray, intr: CameraIntrinsics,
           ransac: RansacParams | None = None, min_inliers: int = 6):
    """Three-point resection inside RANSAC, LM-refined on the inliers.

    `points3d` is (n, 3) world points, `pixels` the matching (n, 2) pixel
    coordinates. Minimal poses come from point triples, so nearly coplanar
    clouds (nadir surveys over flat ground) still resect. Returns
    (Pose, inlier mask) or None on failure.
    """
    ransac = ransac or RansacParams()
    Xw = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(Xw)
    if n < 6:
        return None
    xn = normalized_coords(uv, intr)
    bearings = np.column_stack([xn, np.ones(n)])
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
    rng = np.random.default_rng(ransac.seed)

    best_pose = None
    best_mask = None
    best_count = 0
    max_iters = ransac.iterations
    it = 0
    while it < max_iters:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        for pose in _p3p_candidates(Xw[idx], bearings[idx]):
            uv_pred, z = project_many(Xw, pose, intr)
            err = np.linalg.norm(uv_pred - uv, axis=1)
            mask = (z > 0) & np.isfinite(err) & (err < ransac.threshold_px)
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_mask = mask
                best_pose = pose
                max_iters = min(ransac.iterations,
                                _ransac_iteration_bound(count / n, 3))
    if best_mask is None or best_count < min_inliers:
        return None
    # Support collapsing onto one image line leaves mirror poses tied, so
    # require spread beyond the inlier gate along both image axes.
    spread = np.linalg.svd(uv[best_mask] - uv[best_mask].mean(axis=0),
                           compute_uv=False)
    if spread[1] / np.sqrt(best_count) <= ransac.threshold_px:
        return None

    pose = refine_pose(best_pose, Xw[best_mask], uv[best_mask], intr)
    uv_pred, z = project_many(Xw, pose, intr)
    err = np.linalg.norm(uv_pred - uv, axis=1)
    mask = (z > 0) & np.isfinite(err) & (err < ransac.threshold_px)
    if int(mask.sum()) < min_inliers:
        return None
    return pose, mask


# --- bundle adjustment ------------------------------------------------------

@dataclass
class BAConfig:
    max_iterations: int = 50
    tolerance: float = 1e-8


@dataclass
class BAInfo:
    cost_history: list[float] = field(default_factory=list)  # accepted costs, px^2 sums
    iterations: int = 0
    converged: bool = False

    def rms(self, n_obs: int) -> float:
        if not self.cost_history or n_obs == 0:
            return float("nan")
        return float(np.sqrt(self.cost_history[-1] / n_obs))


def ba_residuals_jacobian(R_all, t_all, X_all, cam_idx, pt_idx, uv, focal, cx, cy,
                          want_jacobian=True):
    """Reprojection residuals and analytic Jacobian blocks for one BA state.

    Camera perturbation is a local chart [dw, dt] applied as
    R <- exp([dw]x) @ R, t <- t + dt; points perturb additively. Returns
    (residuals (n,2), Jcam (n,2,6), Jpt (n,2,3), depths (n,)).
    """
    Rn = R_all[cam_idx]
    q = np.einsum("nij,nj->ni", Rn, X_all[pt_idx]) + t_all[cam_idx]
    z = q[:, 2]
    pred = np.column_stack([focal * q[:, 0] / z + cx, focal * q[:, 1] / z + cy])
    res = pred - uv
    if not want_jacobian:
        return res, None, None, z
    n = len(uv)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = focal / z
    dproj[:, 0, 2] = -focal * q[:, 0] / z**2
    dproj[:, 1, 1] = focal / z
    dproj[:, 1, 2] = -focal * q[:, 1] / z**2
    RX = q - t_all[cam_idx]  # rotated point, perturbation acts on it
    dq_dw = np.zeros((n, 3, 3))
    dq_dw[:, 0, 1] = RX[:, 2]
    dq_dw[:, 0, 2] = -RX[:, 1]
    dq_dw[:, 1, 0] = -RX[:, 2]
    dq_dw[:, 1, 2] = RX[:, 0]
    dq_dw[:, 2, 0] = RX[:, 1]
    dq_dw[:, 2, 1] = -RX[:, 0]
    Jcam = np.empty((n, 2, 6))
    Jcam[:, :, :3] = np.einsum("nij,njk->nik", dproj, dq_dw)
    Jcam[:, :, 3:] = dproj
    Jpt = np.einsum("nij,njk->nik", dproj, Rn)
    return res, Jcam, Jpt, z


class _SparseBA:
    """Schur-complement Levenberg-Marquardt over poses and points."""

    def __init__(self, R_all, t_all, X_all, cam_idx, pt_idx, uv, intr: CameraIntrinsics,
                 fixed_cams: set[int]):
        self.R = [r.copy() for r in R_all]
        self.t = [v.copy() for v in t_all]
        self.X = X_all.copy()
        self.cam_idx = cam_idx
        self.pt_idx = pt_idx
        self.uv = uv
        self.intr = intr
        self.n_cams = len(R_all)
        self.n_pts = len(X_all)
        self.free = sorted(set(range(self.n_cams)) - fixed_cams)
        self.cam_slot = {c: k for k, c in enumerate(self.free)}
        self.free_mask = np.array([c in self.cam_slot for c in cam_idx])
        self.slot = np.array([self.cam_slot.get(c, -1) for c in cam_idx])
        # Pairs of observations of the same point, for Schur assembly.
        order = np.argsort(pt_idx, kind="stable")
        self._order = order
        sorted_pts = pt_idx[order]
        self._group_starts = np.flatnonzero(
            np.concatenate([[True], sorted_pts[1:] != sorted_pts[:-1]])
        )
        self._group_ends = np.concatenate([self._group_starts[1:], [len(order)]])
        pair_a, pair_b = [], []
        for s, e in zip(self._group_starts, self._group_ends):
            members = order[s:e]
            k = len(members)
            if k < 2:
                continue
            ia = np.repeat(members, k)
            ib = np.tile(members, k)
            keep = ia != ib
            pair_a.append(ia[keep])
            pair_b.append(ib[keep])
        self.pair_a = np.concatenate(pair_a) if pair_a else np.empty(0, dtype=int)
        self.pair_b = np.concatenate(pair_b) if pair_b else np.empty(0, dtype=int)

    def _state_arrays(self):
        return np.stack(self.R), np.stack(self.t)

    def cost(self, R_all=None, t_all=None, X_all=None) -> float:
        Rs = np.stack(self.R) if R_all is None else R_all
        ts = np.stack(self.t) if t_all is None else t_all
        Xs = self.X if X_all is None else X_all
        res, _, _, z = ba_residuals_jacobian(
            Rs, ts, Xs, self.cam_idx, self.pt_idx, self.uv,
            self.intr.focal, self.intr.cx, self.intr.cy, want_jacobian=False,
        )
        if (z <= 1e-9).any():
            return float("inf")
        return float((res * res).sum())

    def step(self, lam: float):
        """One damped normal-equations solve; returns (dcam, dpt) updates."""
        Rs, ts = self._state_arrays()
        res, Jcam, Jpt, z = ba_residuals_jacobian(
            Rs, ts, self.X, self.cam_idx, self.pt_idx, self.uv,
            self.intr.focal, self.intr.cx, self.intr.cy,
        )
        if not np.isfinite(res).all():
            return None, None
        n_free = len(self.free)
        free_mask = self.free_mask
        slot = self.slot

        # Blocks of the normal equations.
        U = np.zeros((n_free, 6, 6))
        gc = np.zeros((n_free, 6))
        JcTJc = np.einsum("nri,nrj->nij", Jcam, Jcam)
        JcTr = np.einsum("nri,nr->ni", Jcam, res)
        np.add.at(U, slot[free_mask], JcTJc[free_mask])
        np.add.at(gc, slot[free_mask], JcTr[free_mask])

        V = np.zeros((self.n_pts, 3, 3))
        gp = np.zeros((self.n_pts, 3))
        JpTJp = np.einsum("nri,nrj->nij", Jpt, Jpt)
        JpTr = np.einsum("nri,nr->ni", Jpt, res)
        np.add.at(V, self.pt_idx, JpTJp)
        np.add.at(gp, self.pt_idx, JpTr)

        # Marquardt damping on the diagonals.
        dampU = U.copy()
        dU = np.einsum("nii->ni", U)
        dampU += (lam * np.maximum(dU, 1e-12))[:, :, None] * np.eye(6)
        dampV = V.copy()
        dV = np.einsum("nii->ni", V)
        dampV += (lam * np.maximum(dV, 1e-12))[:, :, None] * np.eye(3)

        try:
            Vinv = np.linalg.inv(dampV)
        except np.linalg.LinAlgError:
            return None, None

        # W blocks exist per observation (one obs per camera-point pair).
        W = np.einsum("nri,nrj->nij", Jcam, Jpt)  # (n, 6, 3)
        Y = np.einsum("nij,njk->nik", W, Vinv[self.pt_idx])  # (n, 6, 3)

        S = np.zeros((n_free, n_free, 6, 6))
        idx = np.arange(n_free)
        S[idx, idx] = dampU
        if len(self.pair_a):
            a, b = self.pair_a, self.pair_b
            both = free_mask[a] & free_mask[b]
            a, b = a[both], b[both]
            contrib = np.einsum("nij,nkj->nik", Y[a], W[b])
            np.add.at(S, (slot[a], slot[b]), -contrib)
        # Same-camera same-point diagonal term.
        diag_contrib = np.einsum("nij,nkj->nik", Y, W)
        np.add.at(S, (slot[free_mask], slot[free_mask]), -diag_contrib[free_mask])

        rhs = -gc.copy()
        yg = np.einsum("nij,nj->ni", Y, gp[self.pt_idx])  # (n, 6)
        np.add.at(rhs, slot[free_mask], yg[free_mask])

        Sm = S.transpose(0, 2, 1, 3).reshape(6 * n_free, 6 * n_free)
        rm = rhs.reshape(-1)
        try:
            dcam = np.linalg.solve(Sm, rm).reshape(n_free, 6)
        except np.linalg.LinAlgError:
            return None, None

        # Back-substitute the point updates.
        wt_dc = np.zeros((self.n_pts, 3))
        dcam_per_obs = np.zeros((len(self.cam_idx), 6))
        dcam_per_obs[free_mask] = dcam[slot[free_mask]]
        contrib_p = np.einsum("nij,ni->nj", W, dcam_per_obs)
        np.add.at(wt_dc, self.pt_idx, contrib_p)
        dpt = np.einsum("nij,nj->ni", Vinv, (-gp - wt_dc))
        return dcam, dpt

    def run(self, config: BAConfig) -> BAInfo:
        info = BAInfo()
        cost = self.cost()
        if not np.isfinite(cost):
            raise NumericalFailure("non-finite reprojection cost", 0)
        info.cost_history.append(cost)
        lam = 1e-4
        for it in range(1, config.max_iterations + 1):
            info.iterations = it
            accepted = False
            for _ in range(12):
                dcam, dpt = self.step(lam)
                if dcam is None:
                    lam *= 10
                    continue
                R_new = [r.copy() for r in self.R]
                t_new = np.stack(self.t).copy()
                for k, c in enumerate(self.free):
                    R_new[c] = so3_exp(dcam[k, :3]) @ self.R[c]
                    t_new[c] = self.t[c] + dcam[k, 3:]
                X_new = self.X + dpt
                new_cost = self.cost(np.stack(R_new), t_new, X_new)
                if np.isnan(new_cost):
                    raise NumericalFailure("non-finite reprojection cost", it)
                if new_cost < cost:
                    self.R = R_new
                    self.t = [t_new[i] for i in range(self.n_cams)]
                    self.X = X_new
                    drop = cost - new_cost
                    cost = new_cost
                    info.cost_history.append(cost)
                    lam = max(lam / 3, 1e-12)
                    accepted = True
                    # absolute near zero cost, relative otherwise
                    if drop < config.tolerance * max(cost, 1.0):
                        info.converged = True
                    break
                lam *= 10
            if not accepted or info.converged:
                info.converged = True
                break
        return info


def bundle_adjust_arrays(poses: dict[int, Pose], points: np.ndarray,
                         cam_ids: np.ndarray, pt_idx: np.ndarray, uv: np.ndarray,
                         intr: CameraIntrinsics, config: BAConfig | None = None,
                         gauge_cam: int | None = None):
    """Joint LM over poses and points; the gauge camera stays frozen.

    `cam_ids` holds image ids (keys of `poses`); returns (poses, points, BAInfo).
    """
    config = config or BAConfig()
    ids = sorted(poses)
    id_to_idx = {c: k for k, c in enumerate(ids)}
    if gauge_cam is None:
        gauge_cam = ids[0]
    R_all = [poses[c].R for c in ids]
    t_all = [poses[c].t for c in ids]
    cam_idx = np.array([id_to_idx[c] for c in cam_ids])
    solver = _SparseBA(R_all, t_all, points, cam_idx, pt_idx, uv, intr,
                       fixed_cams={id_to_idx[gauge_cam]})
    info = solver.run(config)
    new_poses = {c: Pose(solver.R[k], solver.t[k]) for k, c in enumerate(ids)}
    return new_poses, solver.X, info


# --- similarity alignment ---------------------------------------------------

def similarity_transform(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity (s, R, t) with dst ~= s * R @ src + t.

    Umeyama closed form. Returns None for degenerate (collinear) input.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    n = len(src)
    if n < 3:
        return None
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds = src - mu_s
    dd = dst - mu_d
    cov = dd.T @ ds / n
    U, d, Vt = np.linalg.svd(cov)
    # Collinearity: the centered source must span at least a plane.
    ssv = np.linalg.svd(ds, compute_uv=False)
    if ssv[1] < 1e-9 * max(ssv[0], 1e-300):
        return None
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (ds**2).sum() / n
    s = float((d * np.diag(S)).sum() / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def apply_similarity_to_pose(pose: Pose, s: float, R: np.ndarray, t: np.ndarray) -> Pose:
    """Re-express a world->camera pose after the world moves by x' = s*R x + t."""
    C = pose.center()
    C_new = s * (R @ C) + t
    R_new = pose.R @ R.T
    return Pose(R_new, -R_new @ C_new)


def bundle_adjust(rec, config: BAConfig | None = None):
    """Refine all poses and points of a reconstruction in place.

    `rec` must expose poses (dict image id -> Pose), points ((m, 3) array),
    observation_arrays() -> (image ids, point row indices, pixels),
    set_geometry(poses, points), gauge_image, and intrinsics. Returns
    (rec, BAInfo).
    """
    if len(rec.poses) < 2 or len(rec.points) < 1:
        raise ValueError("bundle adjustment needs >= 2 cameras and >= 1 point")
    cam_ids, pt_idx, uv = rec.observation_arrays()
    poses, points, info = bundle_adjust_arrays(
        rec.poses, rec.points, cam_ids, pt_idx, uv, rec.intrinsics,
        config=config, gauge_cam=rec.gauge_image,
    )
    rec.set_geometry(poses, points)
    return rec, info


@dataclass
class AlignmentReport:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residuals: dict[int, float]  # per gcp id, meters, after alignment

    @property
    def mean_residual(self) -> float:
        if not self.residuals:
            return float("nan")
        return float(np.mean(list(self.residuals.values())))


def align_to_gcps(rec, gcps) -> AlignmentReport | None:
    """Similarity-align a reconstruction to surveyed ground control points.

    Each GCP supplies a known world position plus pixel observations in some
    images; observations in posed images are triangulated through the current
    poses, and the closed-form similarity mapping those estimates onto the
    known positions is applied to every pose and point. Returns the transform
    and per-GCP residuals, or None (reconstruction untouched, rec.aligned
    False) when fewer than 3 GCPs triangulate or they are collinear.
    """
    src, dst, ids = [], [], []
    for g in gcps:
        obs = [
            (Observation(image_id, (u, v)), rec.poses[image_id])
            for image_id, u, v in g.observations
            if image_id in rec.poses
        ]
        if len(obs) < 2:
            continue
        X, reason = triangulate(obs, rec.intrinsics)
        if reason != "ok":
            continue
        src.append(X)
        dst.append(g.world)
        ids.append(g.gcp_id)
    if len(src) < 3:
        rec.aligned = False
        return None
    result = similarity_transform(np.array(src), np.array(dst))
    if result is None:
        rec.aligned = False
        return None
    s, R, t = result
    new_points = rec.points @ (s * R).T + t
    new_poses = {c: apply_similarity_to_pose(p, s, R, t) for c, p in rec.poses.items()}
    rec.set_geometry(new_poses, new_points)
    rec.aligned = True
    residuals = {
        gid: float(np.linalg.norm(s * R @ x + t - w))
        for gid, x, w in zip(ids, src, dst)
    }
    return AlignmentReport(s, R, t, residuals)
