"""Geometry kernels: camera projection, rotated-box IoU, oriented box fitting.

Frames: the ego frame is right-handed with x forward, y left, z up, and the
ground near z = 0. Camera frames use the usual computer-vision convention
(x right in the image, y down, z forward along the optical axis). Pixel
coordinates are continuous with (0, 0) at the top-left image corner.

Boxes are treated as 180-degree symmetric: fitting and BEV overlap work with
yaw modulo pi, and no heading sign is ever recovered.

All functions here are pure; none mutate their arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import EmptyCluster

# Per-axis size floor (m) applied when a fit degenerates (1-2 points,
# collinear clusters); keeps IoU and coverage well-defined downstream.
SIZE_FLOOR = 0.05

# Inclusive boundary tolerance (m) for containment queries.
BOUNDARY_TOL = 1e-9

# Polygon-clipping vertices closer than this (m) are merged.
_VERTEX_MERGE_TOL = 1e-9


def wrap_yaw(yaw: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((float(yaw) + math.pi) % (2.0 * math.pi) - math.pi)


def fold_yaw(yaw: float) -> float:
    """Fold an angle modulo pi into [-pi/2, pi/2)."""
    return float((float(yaw) + math.pi / 2) % math.pi - math.pi / 2)


class Point3(NamedTuple):
    """A point in the ego frame, meters."""

    x: float
    y: float
    z: float


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (m), size = (length, width, height) (m), yaw (rad).

    Yaw rotates the length axis about +z and is stored wrapped to [-pi, pi).
    Sizes must be strictly positive.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float

    def __post_init__(self) -> None:
        cx, cy, cz = (float(v) for v in self.center)
        length, width, height = (float(v) for v in self.size)
        vals = (cx, cy, cz, length, width, height, float(self.yaw))
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box parameters must be finite")
        if length <= 0 or width <= 0 or height <= 0:
            raise ValueError(f"box size must be positive, got {(length, width, height)}")
        object.__setattr__(self, "center", (cx, cy, cz))
        object.__setattr__(self, "size", (length, width, height))
        object.__setattr__(self, "yaw", wrap_yaw(self.yaw))

    @property
    def volume(self) -> float:
        length, width, height = self.size
        return length * width * height

    def bev_corners(self) -> np.ndarray:
        """Corners of the box footprint in the x-y plane, CCW, shape (4, 2)."""
        length, width, _ = self.size
        local = np.array(
            [
                [length / 2, width / 2],
                [-length / 2, width / 2],
                [-length / 2, -width / 2],
                [length / 2, -width / 2],
            ]
        )
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center[:2])

    def corners(self) -> np.ndarray:
        """All 8 corners in the ego frame, shape (8, 3)."""
        bev = self.bev_corners()
        cz = self.center[2]
        h2 = self.size[2] / 2
        lo = np.column_stack([bev, np.full(4, cz - h2)])
        hi = np.column_stack([bev, np.full(4, cz + h2)])
        return np.vstack([lo, hi])

    def inflated(self, delta: float) -> "Box3D":
        """Box grown by `delta` meters on every axis (total, not per side)."""
        length, width, height = self.size
        return Box3D(self.center, (length + delta, width + delta, height + delta), self.yaw)


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned pixel rectangle; max corner must exceed min corner."""

    min_u: float
    min_v: float
    max_u: float
    max_v: float

    def __post_init__(self) -> None:
        if not (self.max_u > self.min_u and self.max_v > self.min_v):
            raise ValueError(
                f"degenerate 2D box: ({self.min_u}, {self.min_v}, {self.max_u}, {self.max_v})"
            )

    @property
    def width(self) -> float:
        return self.max_u - self.min_u

    @property
    def height(self) -> float:
        return self.max_v - self.min_v

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.min_u + self.max_u) / 2, (self.min_v + self.max_v) / 2)


@dataclass
class CameraModel:
    """Pinhole camera: intrinsics K (3x3) plus a rigid ego-to-camera transform."""

    intrinsics: np.ndarray
    rotation: np.ndarray  # ego -> camera
    translation: np.ndarray  # ego -> camera
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ValueError("camera focal lengths must be positive")
        rt_r = self.rotation.T @ self.rotation
        if not np.allclose(rt_r, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("camera rotation must be proper (det = +1)")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            np.array_equal(self.intrinsics, other.intrinsics)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.image_width == other.image_width
            and self.image_height == other.image_height
        )


def project_points(cam: CameraModel, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project (N, 3) ego-frame points; returns pixel (N, 2) and depth (N,).

    Rows with depth <= 0 carry NaN pixels; no image-bounds filtering here.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    q = pts @ cam.rotation.T + cam.translation
    depth = q[:, 2]
    uvw = q @ cam.intrinsics.T
    safe = np.where(depth > 0, depth, np.nan)
    with np.errstate(invalid="ignore"):
        uv = uvw[:, :2] / safe[:, None]
    return uv, depth


def in_image(cam: CameraModel, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Boolean mask of projections landing inside [0, W) x [0, H) with depth > 0."""
    u, v = uv[:, 0], uv[:, 1]
    with np.errstate(invalid="ignore"):
        ok = (
            (depth > 0)
            & (u >= 0)
            & (u < cam.image_width)
            & (v >= 0)
            & (v < cam.image_height)
        )
    return ok


def project_point(cam: CameraModel, p: Point3 | Sequence[float]) -> Optional[tuple[float, float, float]]:
    """Project a single point; (u, v, depth) or None if behind or out of frame."""
    uv, depth = project_points(cam, np.asarray(tuple(p), dtype=np.float64))
    if not in_image(cam, uv, depth)[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def project_box3d(cam: CameraModel, box: Box3D) -> Optional[Box2D]:
    """Axis-aligned pixel envelope of the box's visible corners, clipped to the image.

    A corner is visible when its camera-frame depth is positive. Returns None
    when fewer than two corners are visible or the clipped envelope is empty.
    """
    uv, depth = project_points(cam, box.corners())
    vis = depth > 0
    if int(vis.sum()) < 2:
        return None
    u = uv[vis, 0]
    v = uv[vis, 1]
    min_u = max(float(u.min()), 0.0)
    max_u = min(float(u.max()), float(cam.image_width))
    min_v = max(float(v.min()), 0.0)
    max_v = min(float(v.max()), float(cam.image_height))
    if min_u >= max_u or min_v >= max_v:
        return None
    return Box2D(min_u, min_v, max_u, max_v)


def iou_2d(a: Box2D, b: Box2D) -> float:
    """Intersection-over-union of two axis-aligned pixel rectangles."""
    iw = min(a.max_u, b.max_u) - max(a.min_u, b.min_u)
    ih = min(a.max_v, b.max_v) - max(a.min_v, b.min_v)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(max(inter / union, 0.0), 1.0)


def _dedupe_vertices(poly: list[np.ndarray]) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for p in poly:
        if not out or np.hypot(*(p - out[-1])) > _VERTEX_MERGE_TOL:
            out.append(p)
    if len(out) > 1 and np.hypot(*(out[0] - out[-1])) <= _VERTEX_MERGE_TOL:
        out.pop()
    return out


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> list[np.ndarray]:
    """Sutherland-Hodgman clip of a convex polygon by a CCW convex polygon."""
    out = [np.asarray(p, dtype=np.float64) for p in subject]
    m = len(clip)
    for i in range(m):
        a = clip[i]
        b = clip[(i + 1) % m]
        edge = b - a
        if not out:
            break
        inp = out
        out = []
        sides = [float(edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])) for p in inp]
        n = len(inp)
        for j in range(n):
            p, q = inp[j], inp[(j + 1) % n]
            sp, sq = sides[j], sides[(j + 1) % n]
            # on-edge points count as inside
            p_in, q_in = sp >= -1e-12, sq >= -1e-12
            if p_in:
                out.append(p)
            if p_in != q_in:
                t = sp / (sp - sq)
                out.append(p + t * (q - p))
    return _dedupe_vertices(out)


def polygon_area(poly: Sequence[np.ndarray]) -> float:
    """Unsigned area by the shoelace formula."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2.0


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # canonical operand order makes the clipped area exactly symmetric
    if (b.center, b.size, b.yaw) < (a.center, a.size, a.yaw):
        a, b = b, a
    return polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated footprints in the x-y plane."""
    inter = _bev_intersection_area(a, b)
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV intersection area times vertical overlap over the volume union."""
    inter_area = _bev_intersection_area(a, b)
    if inter_area <= 0:
        return 0.0
    top = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    bot = max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    dz = top - bot
    if dz <= 0:
        return 0.0
    inter_vol = inter_area * dz
    union = a.volume + b.volume - inter_vol
    if union <= 0:
        return 0.0
    return min(max(inter_vol / union, 0.0), 1.0)


def convex_hull_xy(xy: np.ndarray) -> np.ndarray:
    """Strict convex hull of 2D points, CCW (monotone chain); collinear dropped."""
    pts = np.unique(np.asarray(xy, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, p, q):
        return (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    # collinear sets collapse to their two extreme points
    return np.vstack(lower[:-1] + upper[:-1])


def min_area_rect(xy: np.ndarray) -> tuple[np.ndarray, tuple[float, float], float]:
    """Minimum-area oriented rectangle of 2D points via rotating calipers.

    Returns (center, (long_side, short_side), yaw), with yaw the orientation
    of the long side folded into [-pi/2, pi/2). Degenerate inputs (a single
    point or a collinear set) report zero extent on the flat axes.
    """
    hull = convex_hull_xy(xy)
    if len(hull) == 1:
        return hull[0].copy(), (0.0, 0.0), 0.0
    if len(hull) == 2:
        d = hull[1] - hull[0]
        length = float(np.hypot(*d))
        yaw = math.atan2(d[1], d[0])
        center = (hull[0] + hull[1]) / 2
        return center, (length, 0.0), fold_yaw(yaw)

    best_area = math.inf
    best: tuple[float, float, float, float, float, float] | None = None
    n = len(hull)
    hx, hy = hull[:, 0], hull[:, 1]
    for i in range(n):
        ex, ey = hull[(i + 1) % n] - hull[i]
        phi = math.atan2(ey, ex)
        c, s = math.cos(phi), math.sin(phi)
        xs = hx * c + hy * s
        ys = -hx * s + hy * c
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = float(ys.min()), float(ys.max())
        area = (x1 - x0) * (y1 - y0)
        if area < best_area:
            best_area = area
            best = (phi, x0, x1, y0, y1, 0.0)
    assert best is not None
    phi, x0, x1, y0, y1, _ = best
    c, s = math.cos(phi), math.sin(phi)
    mx, my = (x0 + x1) / 2, (y0 + y1) / 2
    center = np.array([mx * c - my * s, mx * s + my * c])
    dx, dy = x1 - x0, y1 - y0
    if dy > dx:
        return center, (dy, dx), fold_yaw(phi + math.pi / 2)
    return center, (dx, dy), fold_yaw(phi)


def fit_min_box(points: np.ndarray) -> Box3D:
    """Minimal oriented box of a point set.

    BEV footprint is the minimum-area rectangle of the convex hull (longer
    side mapped to length); vertical extent is [min z, max z]. Every axis is
    floored at SIZE_FLOOR so degenerate clusters still yield a valid box.
    Raises EmptyCluster on zero points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyCluster("cannot fit a box to zero points")
    z0, z1 = float(pts[:, 2].min()), float(pts[:, 2].max())
    center2, (long_side, short_side), yaw = min_area_rect(pts[:, :2])
    size = (
        max(long_side, SIZE_FLOOR),
        max(short_side, SIZE_FLOOR),
        max(z1 - z0, SIZE_FLOOR),
    )
    return Box3D((float(center2[0]), float(center2[1]), (z0 + z1) / 2), size, yaw)


def points_in_box(box: Box3D, pts: np.ndarray) -> np.ndarray:
    """Indices of points inside the oriented box (boundary inclusive to 1e-9)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    d = pts - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = d[:, 0] * c + d[:, 1] * s
    ly = -d[:, 0] * s + d[:, 1] * c
    length, width, height = box.size
    inside = (
        (np.abs(lx) <= length / 2 + BOUNDARY_TOL)
        & (np.abs(ly) <= width / 2 + BOUNDARY_TOL)
        & (np.abs(d[:, 2]) <= height / 2 + BOUNDARY_TOL)
    )
    return np.nonzero(inside)[0].astype(np.int64)
