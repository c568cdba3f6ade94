"""Synthetic LiDAR/camera scenes and the oracle 2D seeker.

A scene is a set of ground-truth boxes placed on the ground plane, a point
cloud sampled on the sensor-facing box surfaces (density falls off with
squared range, optional occlusion culling), uniform ground clutter, and a
surround camera rig. The oracle seeker replaces a 2D detector + segmenter:
it derives per-view 2D boxes and foreground pixel masks from ground truth
and corrupts them according to a noise configuration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, PlacementFailure, SchemaError, UnsupportedVersion
from .geom import Box2D, Box3D, CameraModel, bev_iou, points_in_box, project_box3d, project_points

SCENE_SCHEMA_VERSION = 1
DETECTIONS_SCHEMA_VERSION = 1

# rng stream salt so seeker draws are decoupled from scene generation
_SEEKER_SALT = 7919

# membership test inflation (m) when attributing points to their gt box
_OWNER_INFLATION = 0.01


@dataclass(frozen=True)
class Category:
    """Object category with a typical-size prior and a super-category group.

    The ten built-in categories carry a fixed super-category assignment;
    ad-hoc categories may leave it None and be grouped by prior size.
    """

    name: str
    prior_size: Optional[tuple[float, float, float]]
    super_category: Optional[int] = None
    is_base: bool = True


_CATEGORY_TABLE = [
    # name, (length, width, height) m, super group, base-class flag
    ("car", (4.63, 1.97, 1.74), 0, True),
    ("truck", (6.93, 2.51, 2.84), 0, False),
    ("construction_vehicle", (6.37, 2.85, 3.19), 0, True),
    ("bus", (10.50, 2.94, 3.47), 1, False),
    ("trailer", (12.29, 2.90, 3.87), 1, True),
    ("barrier", (0.50, 2.53, 0.98), 2, True),
    ("motorcycle", (2.11, 0.77, 1.47), 3, False),
    ("bicycle", (1.70, 0.60, 1.28), 3, True),
    ("pedestrian", (0.73, 0.67, 1.77), 4, True),
    ("traffic_cone", (0.41, 0.41, 1.07), 4, False),
]

CATEGORIES: dict[str, Category] = {
    name: Category(name, prior, group, base) for name, prior, group, base in _CATEGORY_TABLE
}

N_SUPER_CATEGORIES = 5

BASE_CATEGORY_NAMES = tuple(c.name for c in CATEGORIES.values() if c.is_base)
NOVEL_CATEGORY_NAMES = tuple(c.name for c in CATEGORIES.values() if not c.is_base)


def get_category(name: str) -> Category:
    try:
        return CATEGORIES[name]
    except KeyError:
        raise SchemaError(f"unknown category name: {name!r}") from None


@dataclass
class SceneConfig:
    """World and sampling parameters for synthetic scene generation."""

    extent: float = 40.0  # world half-size, boxes must fit in [-extent, extent]^2
    counts: dict[str, int] = field(default_factory=dict)
    density: float = 40.0  # surface points per m^2 at 10 m range
    clutter: int = 200  # ground clutter point count (before culling)
    occlusion: bool = True
    n_cameras: int = 6
    image_width: int = 1600
    image_height: int = 900
    hfov_deg: float = 90.0
    camera_height: float = 1.6
    sensor_height: float = 1.8
    min_range: float = 3.0  # objects are kept at least this far from the ego
    size_jitter: float = 0.10  # per-axis uniform size variation around the prior
    clutter_z: float = 0.25  # clutter z is uniform in [0, clutter_z]
    max_points_per_object: int = 1500

    def validate(self) -> None:
        if self.extent <= 0:
            raise ConfigError("scene.extent must be positive")
        if self.density <= 0:
            raise ConfigError("scene.density must be positive")
        for name, count in self.counts.items():
            if name not in CATEGORIES:
                raise ConfigError(f"scene.counts: unknown category {name!r}")
            if count < 0:
                raise ConfigError(f"scene.counts[{name!r}] must be >= 0")
        if self.clutter < 0:
            raise ConfigError("scene.clutter must be >= 0")
        if self.n_cameras < 1:
            raise ConfigError("scene.n_cameras must be >= 1")
        if not (0 < self.hfov_deg < 180):
            raise ConfigError("scene.hfov_deg must be in (0, 180)")
        if not (0 <= self.size_jitter < 0.5):
            raise ConfigError("scene.size_jitter must be in [0, 0.5)")
        if self.clutter == 0 and sum(self.counts.values()) == 0:
            raise ConfigError("scene would contain no points (no objects, no clutter)")


@dataclass
class Scene:
    """Synthetic world: points (N, 3), ground-truth boxes, camera rig, seed."""

    points: np.ndarray
    gt_boxes: list[tuple[Box3D, Category]]
    cameras: list[CameraModel]
    seed: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.points, other.points)
            and self.gt_boxes == other.gt_boxes
            and self.cameras == other.cameras
        )


@dataclass
class SeekerNoiseConfig:
    """Corruption model for the oracle seeker.

    box_jitter_frac shifts each 2D box edge by up to that fraction of the
    box extent; mask_erode_dilate_px erodes (< 0) or dilates (> 0) the
    foreground mask; leak_point_frac adds that fraction of in-box background
    pixels to the mask; score_noise_std scales the gaussian score draw; and
    dropout_prob drops whole detections. The emitted score is penalized by
    the relative box jitter actually applied, so heavier corruption reads as
    lower seeker confidence.
    """

    box_jitter_frac: float = 0.0
    mask_erode_dilate_px: int = 0
    leak_point_frac: float = 0.0
    score_noise_std: float = 0.0
    dropout_prob: float = 0.0

    def validate(self) -> None:
        if not (0 <= self.box_jitter_frac <= 0.45):
            raise ConfigError("seeker.box_jitter_frac must be in [0, 0.45]")
        if not (0 <= self.leak_point_frac <= 1):
            raise ConfigError("seeker.leak_point_frac must be in [0, 1]")
        if not (0 <= self.score_noise_std <= 1):
            raise ConfigError("seeker.score_noise_std must be in [0, 1]")
        if not (0 <= self.dropout_prob <= 1):
            raise ConfigError("seeker.dropout_prob must be in [0, 1]")


@dataclass
class Detection2D:
    """One oracle detection: view index, 2D box, foreground mask, category, score.

    The mask is a sorted array of flat pixel indices (v * image_width + u)
    restricted to cells overlapping the 2D box.
    """

    view: int
    box: Box2D
    mask: np.ndarray
    category: Category
    seeker_score: float

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Detection2D):
            return NotImplemented
        return (
            self.view == other.view
            and self.box == other.box
            and np.array_equal(self.mask, other.mask)
            and self.category == other.category
            and self.seeker_score == other.seeker_score
        )


def default_camera_rig(cfg: SceneConfig) -> list[CameraModel]:
    """Surround rig: n cameras at even yaw spacing, horizontal optical axes."""
    f = (cfg.image_width / 2) / math.tan(math.radians(cfg.hfov_deg) / 2)
    k = np.array(
        [[f, 0.0, cfg.image_width / 2], [0.0, f, cfg.image_height / 2], [0.0, 0.0, 1.0]]
    )
    rig = []
    for m in range(cfg.n_cameras):
        psi = 2.0 * math.pi * m / cfg.n_cameras
        c, s = math.cos(psi), math.sin(psi)
        # rows are the camera axes (right, down, forward) in ego coordinates
        rot = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        cam_pos = np.array([0.0, 0.0, cfg.camera_height])
        t = -rot @ cam_pos
        rig.append(CameraModel(k, rot, t, cfg.image_width, cfg.image_height))
    return rig


def _box_faces(box: Box3D) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]]:
    """Sensor-facing sampling faces: (center, normal, u_axis, v_axis, area).

    The four vertical side faces plus the top; u/v axes are scaled to the
    face half-extents so a unit square maps onto the face.
    """
    length, width, height = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ex = np.array([c, s, 0.0])
    ey = np.array([-s, c, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    ctr = np.asarray(box.center)
    faces = [
        (ctr + ex * length / 2, ex, ey * (width / 2), ez * (height / 2), width * height),
        (ctr - ex * length / 2, -ex, ey * (width / 2), ez * (height / 2), width * height),
        (ctr + ey * width / 2, ey, ex * (length / 2), ez * (height / 2), length * height),
        (ctr - ey * width / 2, -ey, ex * (length / 2), ez * (height / 2), length * height),
        (ctr + ez * height / 2, ez, ex * (length / 2), ey * (width / 2), length * width),
    ]
    return faces


def _sample_box_surface(
    box: Box3D, sensor: np.ndarray, density: float, cap: int, rng: np.random.Generator
) -> np.ndarray:
    """Points on the sensor-facing surfaces, count ~ density * area / (r/10)^2."""
    visible = []
    for ctr, normal, ua, va, area in _box_faces(box):
        if float(normal @ (sensor - ctr)) > 0:
            visible.append((ctr, ua, va, area))
    if not visible:
        return np.empty((0, 3))
    total_area = sum(fa[3] for fa in visible)
    r = float(np.linalg.norm(sensor - np.asarray(box.center)))
    n_total = max(1, int(round(density * total_area * (10.0 / max(r, 1.0)) ** 2)))
    n_total = min(n_total, cap)
    chunks = []
    assigned = 0
    for i, (ctr, ua, va, area) in enumerate(visible):
        if i < len(visible) - 1:
            n_f = int(round(n_total * area / total_area))
            n_f = min(n_f, n_total - assigned)
        else:
            n_f = n_total - assigned
        assigned += n_f
        if n_f <= 0:
            continue
        uv = rng.uniform(-1.0, 1.0, size=(n_f, 2))
        chunks.append(ctr + uv[:, :1] * ua + uv[:, 1:] * va)
    if not chunks:
        return np.empty((0, 3))
    return np.vstack(chunks)


def _bev_distance_to_box(x: float, y: float, box: Box3D) -> float:
    """Distance from a BEV point to the box footprint (0 when inside)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = x - box.center[0], y - box.center[1]
    lx = dx * c + dy * s
    ly = -dx * s + dy * c
    qx = max(abs(lx) - box.size[0] / 2, 0.0)
    qy = max(abs(ly) - box.size[1] / 2, 0.0)
    return math.hypot(qx, qy)


def _segment_blocked(p0: np.ndarray, pts: np.ndarray, box: Box3D) -> np.ndarray:
    """True where the open segment p0 -> point passes through the box (slab test)."""
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    half = np.asarray(box.size) / 2
    a = rot @ (p0 - np.asarray(box.center))
    b = (pts - np.asarray(box.center)) @ rot.T
    d = b - a
    eps = 1e-9
    t_enter = np.zeros(pts.shape[0])
    t_exit = np.ones(pts.shape[0]) - eps
    ok = np.ones(pts.shape[0], dtype=bool)
    for axis in range(3):
        da = d[:, axis]
        pa = a[axis]
        parallel = np.abs(da) < 1e-12
        # parallel rays miss unless the origin lies inside the slab
        ok &= ~parallel | (np.abs(pa) <= half[axis])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[axis] - pa) / da
            t2 = (half[axis] - pa) / da
        lo = np.where(parallel, 0.0, np.minimum(t1, t2))
        hi = np.where(parallel, 1.0, np.maximum(t1, t2))
        t_enter = np.maximum(t_enter, lo)
        t_exit = np.minimum(t_exit, hi)
    return ok & (t_enter <= t_exit) & (t_exit > eps) & (t_enter < 1.0 - eps)


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Deterministically generate a scene from a config and an integer seed.

    Boxes are placed with zero pairwise BEV IoU; raises PlacementFailure if a
    placement cannot be found in 1000 attempts.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    cameras = default_camera_rig(cfg)
    sensor = np.array([0.0, 0.0, cfg.sensor_height])

    # big footprints first makes packing easier; ordering is deterministic
    names = sorted(
        (n for n, k in cfg.counts.items() if k > 0),
        key=lambda n: (-CATEGORIES[n].prior_size[0] * CATEGORIES[n].prior_size[1], n),
    )
    placed: list[tuple[Box3D, Category]] = []
    for name in names:
        cat = CATEGORIES[name]
        for _ in range(cfg.counts[name]):
            for attempt in range(1000):
                x, y = rng.uniform(-cfg.extent, cfg.extent, size=2)
                yaw = rng.uniform(-math.pi, math.pi)
                jit = 1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, size=3)
                size = tuple(p * j for p, j in zip(cat.prior_size, jit))
                box = Box3D((x, y, size[2] / 2), size, yaw)
                # the whole footprint keeps clear of the ego, not just the center
                if _bev_distance_to_box(0.0, 0.0, box) < cfg.min_range:
                    continue
                corners = box.bev_corners()
                if np.abs(corners).max() > cfg.extent:
                    continue
                if any(bev_iou(box, other) > 0 for other, _ in placed):
                    continue
                placed.append((box, cat))
                break
            else:
                raise PlacementFailure(
                    f"could not place {name!r} without overlap in 1000 attempts"
                )

    chunks: list[np.ndarray] = []
    owners: list[int] = []
    for gi, (box, _) in enumerate(placed):
        pts = _sample_box_surface(box, sensor, cfg.density, cfg.max_points_per_object, rng)
        chunks.append(pts)
        owners.append(gi)

    if cfg.clutter > 0:
        cl_xy = rng.uniform(-cfg.extent, cfg.extent, size=(cfg.clutter, 2))
        cl_z = rng.uniform(0.0, cfg.clutter_z, size=(cfg.clutter, 1))
        clutter = np.hstack([cl_xy, cl_z])
        keep = np.ones(len(clutter), dtype=bool)
        for box, _ in placed:
            inside = points_in_box(box.inflated(_OWNER_INFLATION), clutter)
            keep[inside] = False
        chunks.append(clutter[keep])
        owners.append(-1)

    if cfg.occlusion:
        culled = []
        for chunk, owner in zip(chunks, owners):
            keep = np.ones(chunk.shape[0], dtype=bool)
            for gi, (box, _) in enumerate(placed):
                if gi == owner:
                    continue
                keep &= ~_segment_blocked(sensor, chunk, box)
            culled.append(chunk[keep])
        chunks = culled

    nonempty = [c for c in chunks if c.size]
    if not nonempty:
        raise ConfigError("generated scene contains no points; raise density or clutter")
    points = np.vstack(nonempty)
    return Scene(points=points, gt_boxes=placed, cameras=cameras, seed=int(seed))


def pixels_in_box2d(box: Box2D, width: int, height: int) -> np.ndarray:
    """Sorted flat indices of pixel cells [i, i+1) x [j, j+1) overlapping the box."""
    i0 = max(int(math.floor(box.min_u)), 0)
    i1 = min(int(math.ceil(box.max_u)) - 1, width - 1)
    j0 = max(int(math.floor(box.min_v)), 0)
    j1 = min(int(math.ceil(box.max_v)) - 1, height - 1)
    if i1 < i0 or j1 < j0:
        return np.empty(0, dtype=np.int64)
    ii = np.arange(i0, i1 + 1, dtype=np.int64)
    jj = np.arange(j0, j1 + 1, dtype=np.int64)
    return (jj[:, None] * width + ii[None, :]).ravel()


def _shift_pixels(flat: np.ndarray, du: int, dv: int, width: int, height: int) -> np.ndarray:
    v, u = np.divmod(flat, width)
    u2, v2 = u + du, v + dv
    ok = (u2 >= 0) & (u2 < width) & (v2 >= 0) & (v2 < height)
    return v2[ok] * width + u2[ok]


_NEIGHBORHOOD = [(du, dv) for du in (-1, 0, 1) for dv in (-1, 0, 1)]


def dilate_mask(flat: np.ndarray, width: int, height: int, iters: int) -> np.ndarray:
    """8-connected dilation of a sparse pixel set, `iters` times."""
    cur = np.asarray(flat, dtype=np.int64)
    for _ in range(iters):
        if cur.size == 0:
            break
        shifted = [_shift_pixels(cur, du, dv, width, height) for du, dv in _NEIGHBORHOOD]
        cur = np.unique(np.concatenate(shifted))
    return cur


def erode_mask(flat: np.ndarray, width: int, height: int, iters: int) -> np.ndarray:
    """8-connected erosion; pixels keep only if their whole 3x3 patch is set."""
    cur = np.unique(np.asarray(flat, dtype=np.int64))
    for _ in range(iters):
        if cur.size == 0:
            break
        keep = np.ones(cur.size, dtype=bool)
        v, u = np.divmod(cur, width)
        for du, dv in _NEIGHBORHOOD:
            if du == 0 and dv == 0:
                continue
            u2, v2 = u + du, v + dv
            inb = (u2 >= 0) & (u2 < width) & (v2 >= 0) & (v2 < height)
            neigh = np.full(cur.size, -1, dtype=np.int64)
            neigh[inb] = v2[inb] * width + u2[inb]
            keep &= np.isin(neigh, cur)
        cur = cur[keep]
    return cur


def oracle_seek(scene: Scene, noise: SeekerNoiseConfig) -> list[Detection2D]:
    """Emit one corrupted 2D detection per (gt box, camera) with the box visible.

    With an all-zero noise config the boxes equal the projected gt envelopes
    and the masks are exactly the pixel cells covered by the object's own
    projected points. Deterministic given the scene (seeded from scene.seed).
    """
    noise.validate()
    rng = np.random.default_rng([scene.seed, _SEEKER_SALT])
    width, height = 0, 0
    detections: list[Detection2D] = []

    # point-to-object attribution: inside the slightly inflated gt box
    member_idx = [
        points_in_box(box.inflated(_OWNER_INFLATION), scene.points) for box, _ in scene.gt_boxes
    ]

    for view, cam in enumerate(scene.cameras):
        width, height = cam.image_width, cam.image_height
        uv, depth = project_points(cam, scene.points) if scene.points.size else (
            np.empty((0, 2)),
            np.empty(0),
        )
        with np.errstate(invalid="ignore"):
            valid = (
                (depth > 0)
                & (uv[:, 0] >= 0)
                & (uv[:, 0] < width)
                & (uv[:, 1] >= 0)
                & (uv[:, 1] < height)
            )
        flat_all = np.full(scene.points.shape[0], -1, dtype=np.int64)
        if valid.any():
            flat_all[valid] = (
                np.floor(uv[valid, 1]).astype(np.int64) * width
                + np.floor(uv[valid, 0]).astype(np.int64)
            )

        for gi, (box, cat) in enumerate(scene.gt_boxes):
            env = project_box3d(cam, box)
            if env is None:
                continue
            if rng.random() < noise.dropout_prob:
                continue

            jd = rng.uniform(-1.0, 1.0, size=4) * noise.box_jitter_frac
            du0, du1 = jd[0] * env.width, jd[1] * env.width
            dv0, dv1 = jd[2] * env.height, jd[3] * env.height
            min_u = max(min(env.min_u + du0, env.max_u + du1), 0.0)
            max_u = min(max(env.min_u + du0, env.max_u + du1), float(width))
            min_v = max(min(env.min_v + dv0, env.max_v + dv1), 0.0)
            max_v = min(max(env.min_v + dv0, env.max_v + dv1), float(height))
            score_draw = rng.normal(0.0, 1.0) * noise.score_noise_std
            if min_u >= max_u or min_v >= max_v:
                continue
            det_box = Box2D(min_u, min_v, max_u, max_v)

            members = member_idx[gi]
            obj_pix = np.unique(flat_all[members][flat_all[members] >= 0])
            k = noise.mask_erode_dilate_px
            if k > 0:
                obj_pix = dilate_mask(obj_pix, width, height, k)
            elif k < 0:
                obj_pix = erode_mask(obj_pix, width, height, -k)
            box_pix = pixels_in_box2d(det_box, width, height)
            mask = np.intersect1d(obj_pix, box_pix)
            if noise.leak_point_frac > 0:
                background = np.setdiff1d(box_pix, mask)
                n_leak = int(round(noise.leak_point_frac * background.size))
                if n_leak > 0:
                    leak = rng.choice(background, size=n_leak, replace=False)
                    mask = np.union1d(mask, leak)

            jitter_penalty = (abs(jd[0]) + abs(jd[1]) + abs(jd[2]) + abs(jd[3])) / 4.0
            score = float(np.clip(1.0 - abs(score_draw) - jitter_penalty, 0.0, 1.0))
            detections.append(Detection2D(view, det_box, np.sort(mask), cat, score))

    return detections


# ---------------------------------------------------------------------------
# persistence


def mask_to_rle(flat: np.ndarray, total: int) -> list[int]:
    """Row-major run-length encoding: alternating zero/one run counts, zeros first."""
    flat = np.asarray(flat, dtype=np.int64)
    runs: list[int] = []
    pos = 0
    if flat.size:
        breaks = np.nonzero(np.diff(flat) != 1)[0]
        starts = np.concatenate([[0], breaks + 1])
        ends = np.concatenate([breaks, [flat.size - 1]])
        for s, e in zip(starts, ends):
            a, b = int(flat[s]), int(flat[e])
            runs.append(a - pos)
            runs.append(b - a + 1)
            pos = b + 1
    runs.append(total - pos)
    return runs


def rle_to_mask(runs: list[int], total: int) -> np.ndarray:
    """Inverse of mask_to_rle; returns sorted flat indices."""
    if sum(runs) != total:
        raise SchemaError(f"mask_rle runs sum to {sum(runs)}, expected {total}")
    out = []
    pos = 0
    for i, run in enumerate(runs):
        if run < 0:
            raise SchemaError("mask_rle contains a negative run")
        if i % 2 == 1 and run > 0:
            out.append(np.arange(pos, pos + run, dtype=np.int64))
        pos += run
    if not out:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(out)


def _req(obj: dict, key: str, path: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{path}.{key}: missing")
    return obj[key]


def scene_to_dict(scene: Scene, header: Optional[dict] = None) -> dict:
    doc: dict = {"version": SCENE_SCHEMA_VERSION}
    if header is not None:
        doc["header"] = header
    doc["seed"] = scene.seed
    doc["cameras"] = [
        {
            "intrinsics": cam.intrinsics.ravel().tolist(),
            "rotation": cam.rotation.ravel().tolist(),
            "translation": cam.translation.tolist(),
            "width": cam.image_width,
            "height": cam.image_height,
        }
        for cam in scene.cameras
    ]
    doc["points"] = scene.points.ravel().tolist()
    doc["gt"] = [
        {
            "center": list(box.center),
            "size": list(box.size),
            "yaw": box.yaw,
            "category": cat.name,
        }
        for box, cat in scene.gt_boxes
    ]
    return doc


def scene_from_dict(doc: dict, path: str = "scene") -> Scene:
    version = _req(doc, "version", path)
    if version != SCENE_SCHEMA_VERSION:
        raise UnsupportedVersion(
            f"{path}.version: {version} not supported (expected {SCENE_SCHEMA_VERSION})"
        )
    seed = _req(doc, "seed", path)
    cameras = []
    for i, cd in enumerate(_req(doc, "cameras", path)):
        p = f"{path}.cameras[{i}]"
        cameras.append(
            CameraModel(
                np.asarray(_req(cd, "intrinsics", p), dtype=np.float64).reshape(3, 3),
                np.asarray(_req(cd, "rotation", p), dtype=np.float64).reshape(3, 3),
                np.asarray(_req(cd, "translation", p), dtype=np.float64),
                int(_req(cd, "width", p)),
                int(_req(cd, "height", p)),
            )
        )
    flat = np.asarray(_req(doc, "points", path), dtype=np.float64)
    if flat.size % 3 != 0:
        raise SchemaError(f"{path}.points: length {flat.size} is not a multiple of 3")
    points = flat.reshape(-1, 3)
    gt = []
    for i, gd in enumerate(_req(doc, "gt", path)):
        p = f"{path}.gt[{i}]"
        box = Box3D(
            tuple(_req(gd, "center", p)),
            tuple(_req(gd, "size", p)),
            float(_req(gd, "yaw", p)),
        )
        gt.append((box, get_category(_req(gd, "category", p))))
    return Scene(points=points, gt_boxes=gt, cameras=cameras, seed=int(seed))


def save_scene(scene: Scene, path, header: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scene_to_dict(scene, header), f, allow_nan=False, separators=(",", ":"))
        f.write("\n")


def load_scene(path) -> Scene:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from e
    return scene_from_dict(doc, path=str(path))


def detections_to_dict(
    detections: list[Detection2D], width: int, height: int, header: Optional[dict] = None
) -> dict:
    doc: dict = {"version": DETECTIONS_SCHEMA_VERSION}
    if header is not None:
        doc["header"] = header
    doc["image_width"] = width
    doc["image_height"] = height
    doc["detections"] = [
        {
            "view": d.view,
            "box": [d.box.min_u, d.box.min_v, d.box.max_u, d.box.max_v],
            "mask_rle": mask_to_rle(d.mask, width * height),
            "category": d.category.name,
            "score": d.seeker_score,
        }
        for d in detections
    ]
    return doc


def detections_from_dict(doc: dict, path: str = "detections") -> list[Detection2D]:
    version = _req(doc, "version", path)
    if version != DETECTIONS_SCHEMA_VERSION:
        raise UnsupportedVersion(
            f"{path}.version: {version} not supported (expected {DETECTIONS_SCHEMA_VERSION})"
        )
    width = int(_req(doc, "image_width", path))
    height = int(_req(doc, "image_height", path))
    out = []
    for i, dd in enumerate(_req(doc, "detections", path)):
        p = f"{path}.detections[{i}]"
        bu0, bv0, bu1, bv1 = _req(dd, "box", p)
        out.append(
            Detection2D(
                view=int(_req(dd, "view", p)),
                box=Box2D(bu0, bv0, bu1, bv1),
                mask=rle_to_mask(_req(dd, "mask_rle", p), width * height),
                category=get_category(_req(dd, "category", p)),
                seeker_score=float(_req(dd, "score", p)),
            )
        )
    return out


def save_detections(
    detections: list[Detection2D], width: int, height: int, path, header: Optional[dict] = None
) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(
            detections_to_dict(detections, width, height, header),
            f,
            allow_nan=False,
            separators=(",", ":"),
        )
        f.write("\n")


def load_detections(path) -> list[Detection2D]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from e
    return detections_from_dict(doc, path=str(path))
