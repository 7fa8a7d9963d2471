"""Procedural forest scene, nadir survey planning, and ray-cast rendering.

The scene is a gently undulating heightfield with cylinder trunks, ellipsoid
canopies, sphere bushes, and flat red ground-control disks. Rendering is a
per-pixel ray cast against these analytic primitives, which makes per-pixel
class labels exact: the primitive with the nearest positive hit decides both
the shaded RGB value and the label byte. A low-amplitude deterministic value
noise is attached to world surfaces so corner detectors have texture to work
with; everything derives from integer hashes, so a (seed, params) pair always
reproduces the same scene and the same renders.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .imaging import (
    CANOPY,
    GCP_MARKER,
    GROUND,
    TRUNK,
    UNDERSTOREY,
    DEFAULT_PALETTE,
    LabelImage,
    decode_label_raster,
    encode_label_raster,
    parse_ppm,
    ppm_bytes,
)

_SUN = np.array([0.35, 0.25, 0.90])
_SUN = _SUN / np.linalg.norm(_SUN)

_BASE_COLOR = {
    GROUND: np.array([96.0, 82.0, 58.0]),
    TRUNK: np.array([112.0, 74.0, 44.0]),
    CANOPY: np.array([52.0, 112.0, 46.0]),
    UNDERSTOREY: np.array([88.0, 132.0, 58.0]),
    GCP_MARKER: np.array([214.0, 32.0, 30.0]),
}


class PlacementError(RuntimeError):
    """Could not place the requested number of ground control points."""


# --- deterministic surface texture -----------------------------------------

def _hash01(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    """Uniform [0,1) lattice hash of integer 3D coordinates."""
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        ^ np.uint64((seed * 0x27D4EB2F165667C5) & 0xFFFFFFFFFFFFFFFF)
    )
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points: np.ndarray, cell: float, seed: int) -> np.ndarray:
    """Smooth trilinear lattice noise in [0,1) sampled at world points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3) / cell
    base = np.floor(p)
    f = p - base
    w = f * f * (3.0 - 2.0 * f)  # smoothstep keeps gradients continuous
    i = base.astype(np.int64)
    out = np.zeros(len(p))
    for corner in range(8):
        dx, dy, dz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
        h = _hash01(i[:, 0] + dx, i[:, 1] + dy, i[:, 2] + dz, seed)
        wx = w[:, 0] if dx else 1.0 - w[:, 0]
        wy = w[:, 1] if dy else 1.0 - w[:, 1]
        wz = w[:, 2] if dz else 1.0 - w[:, 2]
        out += h * wx * wy * wz
    return out


def surface_texture(points: np.ndarray, seed: int) -> np.ndarray:
    """Two-octave brightness modulation factor around 1.0."""
    n = 0.62 * value_noise(points, 1.05, seed) + 0.38 * value_noise(points, 0.37, seed + 101)
    return 1.0 + 0.55 * (n - 0.5)


# --- scene ------------------------------------------------------------------

@dataclass(frozen=True)
class SceneParams:
    extent: float = 170.0
    tree_count: int = 24
    bush_count: int = 14
    ground_amplitude: float = 1.5
    ground_cells: int = 9
    trunk_radius: tuple[float, float] = (0.25, 0.5)
    trunk_height: tuple[float, float] = (6.0, 11.0)
    canopy_semi_xy: tuple[float, float] = (2.4, 4.2)
    canopy_semi_z: tuple[float, float] = (1.8, 3.2)
    bush_radius: tuple[float, float] = (0.8, 1.6)
    gcp_disk_radius: float = 0.8

    def validate(self) -> None:
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.tree_count < 0 or self.bush_count < 0:
            raise ValueError("primitive counts must be non-negative")
        if self.ground_amplitude < 0:
            raise ValueError("ground amplitude must be non-negative")
        if self.ground_cells < 2:
            raise ValueError("ground grid needs at least 2x2 control points")
        for name in ("trunk_radius", "trunk_height", "canopy_semi_xy",
                     "canopy_semi_z", "bush_radius"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} range must be positive and ordered")
        if self.gcp_disk_radius <= 0:
            raise ValueError("gcp disk radius must be positive")


@dataclass(frozen=True)
class Heightfield:
    extent: float
    values: np.ndarray  # (n, n) control heights, row = y index, col = x index

    def height(self, x, y) -> np.ndarray:
        """Bilinear terrain height; coordinates clamp to the control grid."""
        n = self.values.shape[0]
        gx = np.clip(np.asarray(x, dtype=np.float64) / self.extent, 0.0, 1.0) * (n - 1)
        gy = np.clip(np.asarray(y, dtype=np.float64) / self.extent, 0.0, 1.0) * (n - 1)
        ix = np.minimum(gx.astype(np.int64), n - 2)
        iy = np.minimum(gy.astype(np.int64), n - 2)
        fx = gx - ix
        fy = gy - iy
        v = self.values
        return (
            v[iy, ix] * (1 - fx) * (1 - fy)
            + v[iy, ix + 1] * fx * (1 - fy)
            + v[iy + 1, ix] * (1 - fx) * fy
            + v[iy + 1, ix + 1] * fx * fy
        )

    def normal(self, x, y) -> np.ndarray:
        eps = 1e-3 * self.extent
        dhdx = (self.height(x + eps, y) - self.height(x - eps, y)) / (2 * eps)
        dhdy = (self.height(x, y + eps) - self.height(x, y - eps)) / (2 * eps)
        n = np.stack([-dhdx, -dhdy, np.ones_like(dhdx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    @property
    def zmin(self) -> float:
        return float(self.values.min())

    @property
    def zmax(self) -> float:
        return float(self.values.max())

    @property
    def zmean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class Trunk:
    center_xy: np.ndarray
    radius: float
    z_base: float
    height: float
    tint: np.ndarray

    @property
    def z_top(self) -> float:
        return self.z_base + self.height


@dataclass(frozen=True)
class Canopy:
    center: np.ndarray
    semi: np.ndarray  # (3,) semi-axes
    tint: np.ndarray


@dataclass(frozen=True)
class Bush:
    center: np.ndarray
    radius: float
    tint: np.ndarray


@dataclass(frozen=True)
class GcpDisk:
    gcp_id: int
    center: np.ndarray  # on the ground surface
    radius: float


@dataclass
class SceneDescription:
    seed: int
    params: SceneParams
    ground: Heightfield
    trees: list[tuple[Trunk, Canopy]]
    bushes: list[Bush]
    gcp_disks: list[GcpDisk] = field(default_factory=list)

    @property
    def max_surface_z(self) -> float:
        z = self.ground.zmax
        for trunk, canopy in self.trees:
            z = max(z, trunk.z_top, float(canopy.center[2] + canopy.semi[2]))
        for b in self.bushes:
            z = max(z, float(b.center[2] + b.radius))
        return z


def generate_scene(seed: int, params: SceneParams | None = None) -> SceneDescription:
    """Deterministic forest scene from a seed and size parameters."""
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng(seed)
    n = params.ground_cells
    heights = rng.uniform(-params.ground_amplitude, params.ground_amplitude, size=(n, n))
    ground = Heightfield(params.extent, heights)

    margin = params.canopy_semi_xy[1] + 0.5
    lo = min(margin, params.extent / 2)
    hi = max(params.extent - margin, params.extent / 2)
    trees = []
    for _ in range(params.tree_count):
        cx, cy = rng.uniform(lo, hi, size=2)
        radius = rng.uniform(*params.trunk_radius)
        height = rng.uniform(*params.trunk_height)
        sxy = rng.uniform(*params.canopy_semi_xy)
        sz = rng.uniform(*params.canopy_semi_z)
        tint_t = rng.uniform(0.82, 1.18, size=3)
        tint_c = rng.uniform(0.82, 1.18, size=3)
        z_base = float(ground.height(cx, cy))
        trunk = Trunk(np.array([cx, cy]), radius, z_base, height, tint_t)
        canopy = Canopy(np.array([cx, cy, z_base + height]), np.array([sxy, sxy, sz]), tint_c)
        trees.append((trunk, canopy))

    bushes = []
    b_margin = params.bush_radius[1] + 0.5
    b_lo = min(b_margin, params.extent / 2)
    b_hi = max(params.extent - b_margin, params.extent / 2)
    for _ in range(params.bush_count):
        cx, cy = rng.uniform(b_lo, b_hi, size=2)
        radius = rng.uniform(*params.bush_radius)
        tint = rng.uniform(0.82, 1.18, size=3)
        cz = float(ground.height(cx, cy)) + 0.3 * radius
        bushes.append(Bush(np.array([cx, cy, cz]), radius, tint))

    return SceneDescription(seed, params, ground, trees, bushes)


# --- ray casting ------------------------------------------------------------

def _intersect_ground(ground: Heightfield, origin: np.ndarray, dirs: np.ndarray,
                      iters: int = 42) -> np.ndarray:
    """Bisection on f(t) = ray_z(t) - terrain(ray_xy(t)) for descending rays."""
    n = len(dirs)
    t = np.full(n, np.inf)
    dz = dirs[:, 2]
    desc = dz < -1e-9
    if not desc.any():
        return t
    d = dirs[desc]
    oz = origin[2]
    t_lo = np.maximum((ground.zmax + 0.5 - oz) / d[:, 2], 0.0)
    t_hi = (ground.zmin - 0.5 - oz) / d[:, 2]
    for _ in range(iters):
        tm = 0.5 * (t_lo + t_hi)
        p = origin[None, :] + tm[:, None] * d
        f = p[:, 2] - ground.height(p[:, 0], p[:, 1])
        above = f > 0
        t_lo = np.where(above, tm, t_lo)
        t_hi = np.where(above, t_hi, tm)
    t[desc] = 0.5 * (t_lo + t_hi)
    return t


def _quadratic_smallest_positive(a, b, c, eps=1e-9):
    """Smallest root > eps of a t^2 + b t + c = 0, elementwise; inf if none."""
    disc = b * b - 4.0 * a * c
    ok = (disc >= 0) & (np.abs(a) > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-b - sq) / (2.0 * a)
        t2 = (-b + sq) / (2.0 * a)
    t1 = np.where(ok & (t1 > eps), t1, np.inf)
    t2 = np.where(ok & (t2 > eps), t2, np.inf)
    return np.minimum(t1, t2), np.where(ok, np.maximum(t1, t2), np.inf)


def _intersect_trunk(trunk: Trunk, origin, dirs):
    ox = origin[0] - trunk.center_xy[0]
    oy = origin[1] - trunk.center_xy[1]
    a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
    b = 2.0 * (ox * dirs[:, 0] + oy * dirs[:, 1])
    c = ox * ox + oy * oy - trunk.radius**2
    t1, t2 = _quadratic_smallest_positive(a, b, np.full(len(dirs), c))
    out = np.full(len(dirs), np.inf)
    for t in (t1, t2):
        z = origin[2] + t * dirs[:, 2]
        hit = np.isfinite(t) & (z >= trunk.z_base) & (z <= trunk.z_top)
        out = np.where(hit & (t < out), t, out)
    return out


def _intersect_canopy(canopy: Canopy, origin, dirs):
    q0 = (origin - canopy.center) / canopy.semi
    qd = dirs / canopy.semi
    a = np.einsum("ni,ni->n", qd, qd)
    b = 2.0 * qd @ q0
    c = float(q0 @ q0) - 1.0
    t1, _ = _quadratic_smallest_positive(a, b, np.full(len(dirs), c))
    return t1


def _intersect_bush(bush: Bush, origin, dirs):
    q0 = origin - bush.center
    a = np.einsum("ni,ni->n", dirs, dirs)
    b = 2.0 * dirs @ q0
    c = float(q0 @ q0) - bush.radius**2
    t1, _ = _quadratic_smallest_positive(a, b, np.full(len(dirs), c))
    return t1


def _bounding_sphere(prim) -> tuple[np.ndarray, float]:
    if isinstance(prim, Trunk):
        c = np.array([prim.center_xy[0], prim.center_xy[1],
                      prim.z_base + prim.height / 2])
        return c, float(np.hypot(prim.radius, prim.height / 2)) + 1e-6
    if isinstance(prim, Canopy):
        return prim.center, float(prim.semi.max()) + 1e-6
    return prim.center, prim.radius + 1e-6


def cast_rays(scene: SceneDescription, origin: np.ndarray, dirs: np.ndarray,
              cull: bool = True):
    """Nearest-hit ray cast from a shared origin.

    Returns (t, class ids, hit points, normals, tints). Every descending ray
    hits the terrain, which extends flat beyond the scene extent. `cull`
    skips primitives via a bounding-sphere test; results are identical with
    it off (the brute-force path exists for oracle checks).
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)

    t_best = _intersect_ground(scene.ground, origin, dirs)
    kind = np.full(n, 0, dtype=np.int8)  # 0 ground, 1 trunk, 2 canopy, 3 bush
    prim_idx = np.full(n, -1, dtype=np.int32)

    prims: list[tuple[int, int, object]] = []
    for i, (trunk, canopy) in enumerate(scene.trees):
        prims.append((1, i, trunk))
        prims.append((2, i, canopy))
    for i, bush in enumerate(scene.bushes):
        prims.append((3, i, bush))

    for pkind, pidx, prim in prims:
        if cull:
            c, rb = _bounding_sphere(prim)
            v = c - origin
            dv = dirs @ v
            d2 = np.einsum("ni,ni->n", dirs, dirs)
            # squared distance from sphere center to the ray line
            perp2 = float(v @ v) - dv * dv / d2
            sel = (dv > 0) & (perp2 <= rb * rb)
            if not sel.any():
                continue
        else:
            sel = np.ones(n, dtype=bool)
        sub = dirs[sel]
        if pkind == 1:
            t = _intersect_trunk(prim, origin, sub)
        elif pkind == 2:
            t = _intersect_canopy(prim, origin, sub)
        else:
            t = _intersect_bush(prim, origin, sub)
        t_full = np.full(n, np.inf)
        t_full[sel] = t
        closer = t_full < t_best
        t_best = np.where(closer, t_full, t_best)
        kind[closer] = pkind
        prim_idx[closer] = pidx

    hit = origin[None, :] + t_best[:, None] * dirs
    labels = np.full(n, GROUND, dtype=np.uint8)
    normals = np.zeros((n, 3))
    tints = np.ones((n, 3))

    gmask = kind == 0
    if gmask.any():
        normals[gmask] = scene.ground.normal(hit[gmask, 0], hit[gmask, 1])
        for disk in scene.gcp_disks:
            dx = hit[gmask, 0] - disk.center[0]
            dy = hit[gmask, 1] - disk.center[1]
            on_disk = dx * dx + dy * dy <= disk.radius**2
            sub = np.flatnonzero(gmask)[on_disk]
            labels[sub] = GCP_MARKER

    for pkind, cls in ((1, TRUNK), (2, CANOPY), (3, UNDERSTOREY)):
        kmask = kind == pkind
        if not kmask.any():
            continue
        for pidx in np.unique(prim_idx[kmask]):
            m = kmask & (prim_idx == pidx)
            p = hit[m]
            if pkind == 1:
                trunk = scene.trees[pidx][0]
                nv = np.zeros((m.sum(), 3))
                nv[:, 0] = (p[:, 0] - trunk.center_xy[0]) / trunk.radius
                nv[:, 1] = (p[:, 1] - trunk.center_xy[1]) / trunk.radius
                tints[m] = trunk.tint
            elif pkind == 2:
                canopy = scene.trees[pidx][1]
                nv = (p - canopy.center) / canopy.semi**2
                tints[m] = canopy.tint
            else:
                bush = scene.bushes[pidx]
                nv = (p - bush.center) / bush.radius
                tints[m] = bush.tint
            nv = nv / np.linalg.norm(nv, axis=1, keepdims=True)
            normals[m] = nv
            labels[m] = cls

    return t_best, labels, hit, normals, tints


@dataclass
class RenderedFrame:
    image_id: int
    rgb: np.ndarray  # (h, w, 3) uint8
    labels: LabelImage
    true_pose: Pose


def render_frame(scene: SceneDescription, pose: Pose, intr: CameraIntrinsics,
                 image_id: int = 0) -> RenderedFrame:
    """Ray-cast one frame; RGB and label rasters come from the same hits."""
    center = pose.center()
    if center[2] <= scene.max_surface_z:
        raise ValueError("camera must be above the scene surface")
    w, h = intr.width, intr.height
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    d_cam = np.stack(
        [(us.ravel() - intr.cx) / intr.focal,
         (vs.ravel() - intr.cy) / intr.focal,
         np.ones(w * h)],
        axis=1,
    )
    dirs = d_cam @ pose.R  # R^T applied row-wise
    _, labels, hit, normals, tints = cast_rays(scene, center, dirs)

    lam = np.clip(normals @ _SUN, 0.0, 1.0)
    shade = 0.45 + 0.55 * lam
    tex = surface_texture(hit, scene.seed)
    base = np.empty((len(labels), 3))
    for cls, color in _BASE_COLOR.items():
        base[labels == cls] = color
    rgb = np.clip(base * tints * (shade * tex)[:, None], 0.0, 255.0)
    rgb = rgb.astype(np.uint8).reshape(h, w, 3)
    label_img = LabelImage(labels.reshape(h, w))
    return RenderedFrame(image_id, rgb, label_img, pose.copy())


# --- survey planning --------------------------------------------------------

@dataclass
class SurveyPlan:
    altitude: float
    overlap_forward: float
    overlap_side: float
    intrinsics: CameraIntrinsics
    poses: list[Pose]  # ordered; image id = list index
    centers: np.ndarray  # (n, 3) camera centers, same order

    def __len__(self) -> int:
        return len(self.poses)


def _line_positions(extent: float, footprint: float, spacing: float) -> np.ndarray:
    """Camera coordinates covering [0, extent] with footprints of given size.

    The nominal spacing shrinks to distribute cameras evenly, so realized
    overlap is always >= the requested overlap.
    """
    usable = extent - footprint
    if usable <= 0:
        return np.array([extent / 2.0])
    count = int(np.ceil(usable / spacing - 1e-12)) + 1
    actual = usable / (count - 1)
    return footprint / 2.0 + actual * np.arange(count)


def plan_survey(scene: SceneDescription, altitude: float, overlap_fwd: float,
                overlap_side: float, intr: CameraIntrinsics) -> SurveyPlan:
    """Serpentine nadir grid achieving the requested footprint overlaps.

    Altitude is measured above mean ground height. Rows run along world y
    (the forward axis); adjacent rows step along x (the side axis).
    """
    if not (0 <= overlap_fwd < 1 and 0 <= overlap_side < 1):
        raise ValueError("overlaps must lie in [0, 1)")
    z_cam = scene.ground.zmean + altitude
    if z_cam <= scene.max_surface_z:
        raise ValueError("altitude does not clear the scene surface")

    foot_x = intr.width * altitude / intr.focal
    foot_y = intr.height * altitude / intr.focal
    xs = _line_positions(scene.params.extent, foot_x, foot_x * (1.0 - overlap_side))
    ys = _line_positions(scene.params.extent, foot_y, foot_y * (1.0 - overlap_fwd))

    R_nadir = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    poses = []
    centers = []
    for col, x in enumerate(xs):
        ys_run = ys if col % 2 == 0 else ys[::-1]
        for y in ys_run:
            C = np.array([x, y, z_cam])
            poses.append(Pose(R_nadir.copy(), -R_nadir @ C))
            centers.append(C)
    return SurveyPlan(altitude, overlap_fwd, overlap_side, intr, poses,
                      np.array(centers))


# --- ground control points ---------------------------------------------------

@dataclass
class GroundControlPoint:
    gcp_id: int
    world: np.ndarray
    observations: list[tuple[int, float, float]] = field(default_factory=list)


def _blocked_overhead(scene: SceneDescription, x: float, y: float,
                      clearance: float) -> bool:
    """True when anything hangs over (x, y) within the clearance radius."""
    for trunk, canopy in scene.trees:
        if np.hypot(x - trunk.center_xy[0], y - trunk.center_xy[1]) <= trunk.radius + clearance:
            return True
        r = np.hypot((x - canopy.center[0]) / canopy.semi[0],
                     (y - canopy.center[1]) / canopy.semi[1])
        if r <= 1.0 + clearance / canopy.semi[:2].min():
            return True
    for bush in scene.bushes:
        if np.hypot(x - bush.center[0], y - bush.center[1]) <= bush.radius + clearance:
            return True
    return False


def place_gcps(scene: SceneDescription, count: int, seed: int) -> list[GroundControlPoint]:
    """Drop `count` marker disks on open ground; registers them in the scene.

    Positions are rejected when overhung by canopy, trunk, or bush, or when
    too close to an earlier marker. Observations stay empty until
    fill_gcp_observations runs against a survey's true poses.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(seed)
    radius = scene.params.gcp_disk_radius
    border = min(10.0, scene.params.extent / 4)
    gcps: list[GroundControlPoint] = []
    tries = 0
    max_tries = 400 * max(count, 1)
    while len(gcps) < count and tries < max_tries:
        tries += 1
        x, y = rng.uniform(border, scene.params.extent - border, size=2)
        if _blocked_overhead(scene, x, y, clearance=radius + 0.4):
            continue
        if any(np.hypot(x - g.world[0], y - g.world[1]) < 4 * radius for g in gcps):
            continue
        z = float(scene.ground.height(x, y))
        gcps.append(GroundControlPoint(len(gcps), np.array([x, y, z])))
    if len(gcps) < count:
        raise PlacementError(
            f"placed {len(gcps)} of {count} ground control points "
            f"({count - len(gcps)} short) after {max_tries} attempts"
        )
    for g in gcps:
        scene.gcp_disks.append(GcpDisk(g.gcp_id, g.world.copy(), radius))
    return gcps


def fill_gcp_observations(gcps: list[GroundControlPoint],
                          poses: list[Pose] | dict[int, Pose],
                          intr: CameraIntrinsics, scene: SceneDescription) -> None:
    """Record exact pixel observations of each marker in each unoccluded view."""
    items = list(poses.items()) if isinstance(poses, dict) else list(enumerate(poses))
    for g in gcps:
        g.observations.clear()
        for image_id, pose in items:
            q = pose.R @ g.world + pose.t
            if q[2] <= 0:
                continue
            u = intr.focal * q[0] / q[2] + intr.cx
            v = intr.focal * q[1] / q[2] + intr.cy
            if not (0 <= u <= intr.width - 1 and 0 <= v <= intr.height - 1):
                continue
            origin = pose.center()
            ray = g.world - origin
            _, labels, hit, _, _ = cast_rays(scene, origin, ray[None, :])
            if labels[0] != GCP_MARKER:
                continue
            if np.linalg.norm(hit[0] - g.world) > scene.params.gcp_disk_radius:
                continue
            g.observations.append((image_id, float(u), float(v)))


# --- ground-truth oracles -----------------------------------------------------

def surface_class_candidates(scene: SceneDescription, points: np.ndarray,
                             tol: float = 0.5) -> list[set[int]]:
    """Classes of every scene surface within `tol` of the nearest surface.

    For each query point, distances to ground (and marker disks), trunks,
    canopies, and bushes are evaluated; the result set contains every class
    whose nearest surface lies within (minimum distance + tol). Ellipsoid
    distance is first-order approximate, adequate at sub-meter tolerances.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    dists: dict[int, np.ndarray] = {}

    ground_d = np.abs(pts[:, 2] - scene.ground.height(pts[:, 0], pts[:, 1]))
    dists[GROUND] = ground_d

    if scene.gcp_disks:
        d = np.full(n, np.inf)
        for disk in scene.gcp_disks:
            horiz = np.hypot(pts[:, 0] - disk.center[0], pts[:, 1] - disk.center[1])
            d = np.minimum(d, np.hypot(np.maximum(horiz - disk.radius, 0.0), ground_d))
        dists[GCP_MARKER] = d

    if scene.trees:
        dt = np.full(n, np.inf)
        dc = np.full(n, np.inf)
        for trunk, canopy in scene.trees:
            rho = np.hypot(pts[:, 0] - trunk.center_xy[0], pts[:, 1] - trunk.center_xy[1])
            dz = np.maximum(np.maximum(trunk.z_base - pts[:, 2], pts[:, 2] - trunk.z_top), 0.0)
            dt = np.minimum(dt, np.hypot(rho - trunk.radius, dz))
            q = (pts - canopy.center) / canopy.semi
            qn = np.linalg.norm(q, axis=1)
            grad = np.linalg.norm(q / canopy.semi, axis=1)
            dc = np.minimum(dc, np.abs(qn - 1.0) / np.maximum(grad / np.maximum(qn, 1e-12), 1e-12))
        dists[TRUNK] = dt
        dists[CANOPY] = dc

    if scene.bushes:
        db = np.full(n, np.inf)
        for bush in scene.bushes:
            db = np.minimum(db, np.abs(np.linalg.norm(pts - bush.center, axis=1) - bush.radius))
        dists[UNDERSTOREY] = db

    all_d = np.stack(list(dists.values()))
    dmin = all_d.min(axis=0)
    out: list[set[int]] = []
    classes = list(dists.keys())
    for i in range(n):
        out.append({cls for k, cls in enumerate(classes) if all_d[k, i] <= dmin[i] + tol})
    return out


# --- dataset on disk ----------------------------------------------------------

GCP_HEADER = "#semantic-sfm gcp v1"
POSES_HEADER = "#semantic-sfm poses v1"
CAMERA_HEADER = "#semantic-sfm camera v1"


@dataclass
class Dataset:
    """A survey in memory, keyed everywhere by integer image id."""

    intrinsics: CameraIntrinsics
    images: dict[int, np.ndarray]
    labels: dict[int, LabelImage]
    image_names: dict[int, str]
    gcps: list[GroundControlPoint]
    poses_gt: dict[int, Pose] | None = None


def _frame_name(image_id: int) -> str:
    return f"{image_id:04d}.ppm"


def export_dataset(frames: list[RenderedFrame], gcps: list[GroundControlPoint],
                   directory: str, intr: CameraIntrinsics) -> None:
    """Write images/, labels/, gcp_list.txt, poses_gt.txt, camera.txt.

    Raster formats are lossless (binary PPM/PGM), so a round trip through
    load_dataset reproduces the rasters exactly. The ground-truth pose file
    is for evaluation only; the reconstruction pipeline must not read it.
    """
    img_dir = os.path.join(directory, "images")
    lab_dir = os.path.join(directory, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    for fr in frames:
        name = _frame_name(fr.image_id)
        with open(os.path.join(img_dir, name), "wb") as f:
            f.write(ppm_bytes(fr.rgb))
        with open(os.path.join(lab_dir, name.replace(".ppm", ".pgm")), "wb") as f:
            f.write(encode_label_raster(fr.labels, DEFAULT_PALETTE))

    with open(os.path.join(directory, "camera.txt"), "w") as f:
        f.write(CAMERA_HEADER + "\n")
        f.write(f"{intr.focal:.17g} {intr.cx:.17g} {intr.cy:.17g} "
                f"{intr.width} {intr.height}\n")

    with open(os.path.join(directory, "poses_gt.txt"), "w") as f:
        f.write(POSES_HEADER + "\n")
        for fr in frames:
            R = fr.true_pose.R.ravel()
            t = fr.true_pose.t
            vals = " ".join(f"{x:.17g}" for x in (*R, *t))
            f.write(f"{_frame_name(fr.image_id)} {vals}\n")

    with open(os.path.join(directory, "gcp_list.txt"), "w") as f:
        f.write(GCP_HEADER + "\n")
        for g in gcps:
            for image_id, u, v in g.observations:
                f.write(f"{g.gcp_id} {g.world[0]:.17g} {g.world[1]:.17g} "
                        f"{g.world[2]:.17g} {_frame_name(image_id)} "
                        f"{u:.17g} {v:.17g}\n")


class DatasetError(RuntimeError):
    """Missing or malformed dataset files."""


def load_dataset(directory: str) -> Dataset:
    """Read a dataset directory back into memory.

    Ground-truth poses are attached when present but are meant for
    evaluation; reconstruction must not consult them.
    """
    img_dir = os.path.join(directory, "images")
    lab_dir = os.path.join(directory, "labels")
    if not os.path.isdir(img_dir):
        raise DatasetError(f"missing images directory: {img_dir}")
    if not os.path.isdir(lab_dir):
        raise DatasetError(f"missing labels directory: {lab_dir}")

    cam_path = os.path.join(directory, "camera.txt")
    if not os.path.isfile(cam_path):
        raise DatasetError(f"missing camera file: {cam_path}")
    with open(cam_path) as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DatasetError(f"camera file has no data line: {cam_path}")
    parts = lines[0].split()
    if len(parts) != 5:
        raise DatasetError(f"camera line needs 5 fields, got {len(parts)}: {cam_path}")
    intr = CameraIntrinsics(float(parts[0]), float(parts[1]), float(parts[2]),
                            int(parts[3]), int(parts[4]))

    names = sorted(n for n in os.listdir(img_dir) if n.endswith(".ppm"))
    if not names:
        raise DatasetError(f"no .ppm images found in {img_dir}")
    images: dict[int, np.ndarray] = {}
    labels: dict[int, LabelImage] = {}
    for i, name in enumerate(names):
        with open(os.path.join(img_dir, name), "rb") as f:
            images[i] = parse_ppm(f.read())
        lab_path = os.path.join(lab_dir, name.replace(".ppm", ".pgm"))
        if not os.path.isfile(lab_path):
            raise DatasetError(f"missing label raster for image {name}: {lab_path}")
        with open(lab_path, "rb") as f:
            labels[i] = decode_label_raster(f.read(), DEFAULT_PALETTE)
    name_to_id = {n: i for i, n in enumerate(names)}

    gcps: list[GroundControlPoint] = []
    gcp_path = os.path.join(directory, "gcp_list.txt")
    if os.path.isfile(gcp_path):
        by_id: dict[int, GroundControlPoint] = {}
        with open(gcp_path) as f:
            for lineno, ln in enumerate(f, start=1):
                ln = ln.strip()
                if not ln or ln.startswith("#"):
                    continue
                parts = ln.split()
                if len(parts) != 7:
                    raise DatasetError(
                        f"gcp_list.txt line {lineno}: expected 7 fields, got {len(parts)}"
                    )
                gid = int(parts[0])
                world = np.array([float(parts[1]), float(parts[2]), float(parts[3])])
                if parts[4] not in name_to_id:
                    raise DatasetError(
                        f"gcp_list.txt line {lineno}: unknown image {parts[4]!r}"
                    )
                g = by_id.setdefault(gid, GroundControlPoint(gid, world))
                g.observations.append(
                    (name_to_id[parts[4]], float(parts[5]), float(parts[6]))
                )
        gcps = [by_id[k] for k in sorted(by_id)]

    poses_gt = None
    pose_path = os.path.join(directory, "poses_gt.txt")
    if os.path.isfile(pose_path):
        poses_gt = {}
        with open(pose_path) as f:
            for lineno, ln in enumerate(f, start=1):
                ln = ln.strip()
                if not ln or ln.startswith("#"):
                    continue
                parts = ln.split()
                if len(parts) != 13:
                    raise DatasetError(
                        f"poses_gt.txt line {lineno}: expected 13 fields, got {len(parts)}"
                    )
                if parts[0] not in name_to_id:
                    raise DatasetError(
                        f"poses_gt.txt line {lineno}: unknown image {parts[0]!r}"
                    )
                vals = [float(x) for x in parts[1:]]
                poses_gt[name_to_id[parts[0]]] = Pose(
                    np.array(vals[:9]).reshape(3, 3), np.array(vals[9:])
                )

    return Dataset(intr, images, labels, dict(enumerate(names)), gcps, poses_gt)
