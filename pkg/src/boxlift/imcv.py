"""Cross-validated 3D proposal generation from 2D detections.

Per detection: pull out the scene points whose projections land on the
foreground mask, score each by how central it sits in the 2D box and how
near it is in range, cluster the survivors, greedily merge clusters while
the projected-box consistency with the 2D detection improves, then pick the
best box from a prior/fitted size ladder crossed with a yaw sweep, scored by
point coverage and projected IoU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.cluster import DBSCAN

from .errors import ConfigError, EmptyCluster
from .geom import Box2D, Box3D, CameraModel, fit_min_box, iou_2d, points_in_box, project_box3d, project_points
from .scene import Category, Detection2D, Scene


@dataclass
class ImcvConfig:
    """Knobs for foreground scoring, clustering, merging, and selection."""

    dbscan_eps: float = 0.50
    dbscan_min_samples: int = 1
    r_max: float = 60.0
    alpha_pts: float = 0.5
    alpha_iou: float = 0.5
    n_sizes: int = 3
    n_yaws: int = 16
    thresh_dim_factor: float = 1.2

    def validate(self) -> None:
        if self.dbscan_eps <= 0:
            raise ConfigError("imcv.dbscan_eps must be positive")
        if self.dbscan_min_samples < 1:
            raise ConfigError("imcv.dbscan_min_samples must be >= 1")
        if self.r_max <= 0:
            raise ConfigError("imcv.r_max must be positive")
        if abs(self.alpha_pts + self.alpha_iou - 1.0) > 1e-9:
            raise ConfigError("imcv.alpha_pts + imcv.alpha_iou must equal 1")
        if self.alpha_pts < 0 or self.alpha_iou < 0:
            raise ConfigError("imcv score weights must be non-negative")
        if self.n_sizes < 1 or self.n_yaws < 1:
            raise ConfigError("imcv.n_sizes and imcv.n_yaws must be >= 1")
        if self.thresh_dim_factor <= 0:
            raise ConfigError("imcv.thresh_dim_factor must be positive")


@dataclass
class ScoredPoint:
    """A foreground point index with its normalized geometry score."""

    index: int
    s_geo: float


@dataclass
class Cluster:
    """A point cluster with its share of the detection's geometry-score mass,
    fitted box, and projected consistency with the 2D detection."""

    indices: np.ndarray
    s_geo: float
    box: Box3D
    s_iou: float


@dataclass
class Proposal:
    """Selected 3D box for one detection, with provenance scores."""

    box: Box3D
    category: Category
    s_geo: float
    s_iou: float
    s_pts: float
    s_total: float
    seeker_score: float
    view: int
    det_index: int


def consistency_score(cam: CameraModel, box: Box3D, det_box: Box2D) -> float:
    """Projected IoU between the 3D box envelope and the 2D detection box."""
    env = project_box3d(cam, box)
    if env is None:
        return 0.0
    return iou_2d(env, det_box)


def extract_foreground_points(scene: Scene, det: Detection2D) -> np.ndarray:
    """Indices of scene points whose projection lands on a mask pixel."""
    cam = scene.cameras[det.view]
    uv, depth = project_points(cam, scene.points)
    return _foreground_from_projection(cam, uv, depth, det)


def _foreground_from_projection(
    cam: CameraModel, uv: np.ndarray, depth: np.ndarray, det: Detection2D
) -> np.ndarray:
    if det.mask.size == 0 or uv.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    with np.errstate(invalid="ignore"):
        valid = (
            (depth > 0)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] < cam.image_width)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] < cam.image_height)
        )
    idx = np.nonzero(valid)[0]
    flat = (
        np.floor(uv[idx, 1]).astype(np.int64) * cam.image_width
        + np.floor(uv[idx, 0]).astype(np.int64)
    )
    hit = np.isin(flat, det.mask)
    return idx[hit].astype(np.int64)


def geometry_scores(
    scene: Scene, det: Detection2D, fg: np.ndarray, r_max: float
) -> list[ScoredPoint]:
    """Per-point geometry scores over a detection's foreground set.

    Raw score is 1 - sqrt((x'^2 + y'^2 + r'^2) / 3) where x', y' are the
    pixel offsets from the 2D box center over the half extents (clamped to
    [-1, 1]) and r' is the point range over r_max (clamped to [0, 1]); the
    raw scores are then min-max normalized within the foreground set (all
    ones when the set has no spread).
    """
    fg = np.asarray(fg, dtype=np.int64)
    if fg.size == 0:
        return []
    cam = scene.cameras[det.view]
    pts = scene.points[fg]
    uv, _ = project_points(cam, pts)
    cu, cv = det.box.center
    xo = np.clip((uv[:, 0] - cu) / (det.box.width / 2), -1.0, 1.0)
    yo = np.clip((uv[:, 1] - cv) / (det.box.height / 2), -1.0, 1.0)
    ro = np.clip(np.linalg.norm(pts, axis=1) / r_max, 0.0, 1.0)
    raw = 1.0 - np.sqrt((xo**2 + yo**2 + ro**2) / 3.0)
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        s = np.ones_like(raw)
    else:
        s = (raw - lo) / (hi - lo)
    return [ScoredPoint(int(i), float(v)) for i, v in zip(fg, s)]


def cluster_points(
    scene: Scene,
    det: Detection2D,
    scored: list[ScoredPoint],
    eps: float,
    min_samples: int,
) -> list[Cluster]:
    """Density-cluster the scored foreground points.

    Each cluster's s_geo is its members' score mass over the whole foreground
    set's mass, its box is the minimal oriented fit, and its s_iou is the
    projected consistency with the detection box. With min_samples = 1 every
    point lands in exactly one cluster; with larger min_samples, density
    noise points belong to no cluster (so the s_geo shares sum to <= 1).
    """
    if not scored:
        return []
    idx = np.array([sp.index for sp in scored], dtype=np.int64)
    sgeo = np.array([sp.s_geo for sp in scored])
    coords = scene.points[idx]
    labels = DBSCAN(eps=eps, min_samples=min_samples).fit_predict(coords)
    total = float(sgeo.sum())
    cam = scene.cameras[det.view]
    clusters = []
    for label in sorted(set(labels) - {-1}):
        members = labels == label
        box = fit_min_box(coords[members])
        clusters.append(
            Cluster(
                indices=idx[members],
                s_geo=float(sgeo[members].sum()) / total if total > 0 else 0.0,
                box=box,
                s_iou=consistency_score(cam, box, det.box),
            )
        )
    return clusters


def dim_threshold(category: Category, factor: float) -> tuple[float, float, float]:
    """Per-class absolute dimension cap: factor times the size prior.

    BEV prior dims are oriented longer-first to match fitted boxes, whose
    longer side is always mapped to length.
    """
    pl, pw, ph = category.prior_size
    return (factor * max(pl, pw), factor * min(pl, pw), factor * ph)


def _dims_ok(box: Box3D, thresh: tuple[float, float, float]) -> bool:
    return box.size[0] < thresh[0] and box.size[1] < thresh[1] and box.size[2] < thresh[2]


def merge_clusters(
    scene: Scene,
    det: Detection2D,
    clusters: list[Cluster],
    thresh: tuple[float, float, float],
) -> Cluster:
    """Greedy cluster merging seeded at the highest-confidence cluster.

    Remaining clusters are tried in descending confidence order; a merge is
    kept only when the refit box's projected consistency strictly improves
    and every refit dimension stays below the per-class cap.
    """
    if not clusters:
        raise EmptyCluster("merge_clusters requires at least one cluster")
    cam = scene.cameras[det.view]
    order = sorted(range(len(clusters)), key=lambda i: (-clusters[i].s_geo, i))
    first = clusters[order[0]]
    merged_idx = first.indices
    merged_geo = first.s_geo
    box = first.box
    s_iou = first.s_iou
    for i in order[1:]:
        cand_idx = np.concatenate([merged_idx, clusters[i].indices])
        cand_box = fit_min_box(scene.points[cand_idx])
        cand_iou = consistency_score(cam, cand_box, det.box)
        if cand_iou > s_iou and _dims_ok(cand_box, thresh):
            merged_idx = cand_idx
            merged_geo += clusters[i].s_geo
            box = cand_box
            s_iou = cand_iou
    return Cluster(indices=np.sort(merged_idx), s_geo=merged_geo, box=box, s_iou=s_iou)


def generate_candidates(
    merged_box: Box3D,
    cluster_pts: np.ndarray,
    prior_size: tuple[float, float, float],
    n_sizes: int,
    n_yaws: int,
) -> list[Box3D]:
    """Size ladder x yaw sweep around the merged cluster, n_sizes * n_yaws boxes.

    Sizes interpolate from the category prior to the fitted size (prior only
    when n_sizes = 1); yaws are uniform over [0, pi). Each candidate's BEV
    center is slid along the ego-to-centroid direction until its near face
    touches the cluster's nearest point in that direction; the z center sits
    at the cluster's vertical midpoint.
    """
    pts = np.asarray(cluster_pts, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyCluster("generate_candidates requires a nonempty cluster")
    pl, pw, ph = prior_size
    prior = np.array([max(pl, pw), min(pl, pw), ph])
    fitted = np.asarray(merged_box.size)
    if n_sizes == 1:
        sizes = [prior]
    else:
        sizes = [prior + (fitted - prior) * k / (n_sizes - 1) for k in range(n_sizes)]

    centroid = pts[:, :2].mean(axis=0)
    norm = float(np.hypot(*centroid))
    d = centroid / norm if norm > 1e-9 else np.array([1.0, 0.0])
    phi_d = math.atan2(d[1], d[0])
    proj = pts[:, :2] @ d
    n_min = float(proj.min())
    z_mid = float((pts[:, 2].min() + pts[:, 2].max()) / 2)
    lateral = centroid - (centroid @ d) * d

    candidates = []
    for size in sizes:
        length, width, height = (max(float(v), 1e-3) for v in size)
        for j in range(n_yaws):
            yaw = j * math.pi / n_yaws
            # support radius of the footprint along the viewing direction
            h_d = (length / 2) * abs(math.cos(yaw - phi_d)) + (width / 2) * abs(
                math.sin(yaw - phi_d)
            )
            ctr2 = lateral + (n_min + h_d) * d
            candidates.append(
                Box3D((float(ctr2[0]), float(ctr2[1]), z_mid), (length, width, height), yaw)
            )
    return candidates


def score_candidates(
    scene: Scene,
    det: Detection2D,
    candidates: list[Box3D],
    cluster_pts: np.ndarray,
    alpha_pts: float,
    alpha_iou: float,
) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    """Coverage/consistency scores for every candidate and the argmax index.

    Total = alpha_pts * coverage + alpha_iou * projected IoU. Ties go to the
    higher projected IoU, then the lower candidate index.
    """
    if not candidates:
        raise EmptyCluster("score_candidates requires at least one candidate")
    pts = np.asarray(cluster_pts, dtype=np.float64).reshape(-1, 3)
    cam = scene.cameras[det.view]
    n = len(candidates)
    s_pts = np.zeros(n)
    s_iou = np.zeros(n)
    for i, cand in enumerate(candidates):
        s_pts[i] = len(points_in_box(cand, pts)) / pts.shape[0]
        s_iou[i] = consistency_score(cam, cand, det.box)
    s_total = alpha_pts * s_pts + alpha_iou * s_iou
    best = 0
    for i in range(1, n):
        if s_total[i] > s_total[best] or (
            s_total[i] == s_total[best] and s_iou[i] > s_iou[best]
        ):
            best = i
    return best, s_pts, s_iou, s_total


def run_imcv(
    scene: Scene, detections: list[Detection2D], config: Optional[ImcvConfig] = None
) -> tuple[list[Proposal], list[dict]]:
    """Full proposal pipeline over a scene's detections, in input order.

    Detections whose foreground set is empty produce no proposal and are
    reported in the diagnostics list; processed detections get a diagnostics
    record carrying their cluster count.
    """
    cfg = config or ImcvConfig()
    cfg.validate()
    proposals: list[Proposal] = []
    diagnostics: list[dict] = []
    proj_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    per_view_counter: dict[int, int] = {}

    for det in detections:
        n = per_view_counter.get(det.view, 0)
        per_view_counter[det.view] = n + 1
        cam = scene.cameras[det.view]
        if det.view not in proj_cache:
            proj_cache[det.view] = project_points(cam, scene.points)
        uv, depth = proj_cache[det.view]
        fg = _foreground_from_projection(cam, uv, depth, det)
        if fg.size == 0:
            diagnostics.append(
                {"view": det.view, "det_index": n, "status": "skipped", "reason": "empty_foreground"}
            )
            continue
        scored = geometry_scores(scene, det, fg, cfg.r_max)
        clusters = cluster_points(scene, det, scored, cfg.dbscan_eps, cfg.dbscan_min_samples)
        if not clusters:
            diagnostics.append(
                {"view": det.view, "det_index": n, "status": "skipped", "reason": "no_clusters"}
            )
            continue
        merged = merge_clusters(
            scene, det, clusters, dim_threshold(det.category, cfg.thresh_dim_factor)
        )
        cluster_pts = scene.points[merged.indices]
        candidates = generate_candidates(
            merged.box, cluster_pts, det.category.prior_size, cfg.n_sizes, cfg.n_yaws
        )
        best, s_pts, s_iou, s_total = score_candidates(
            scene, det, candidates, cluster_pts, cfg.alpha_pts, cfg.alpha_iou
        )
        proposals.append(
            Proposal(
                box=candidates[best],
                category=det.category,
                s_geo=merged.s_geo,
                s_iou=float(s_iou[best]),
                s_pts=float(s_pts[best]),
                s_total=float(s_total[best]),
                seeker_score=det.seeker_score,
                view=det.view,
                det_index=n,
            )
        )
        diagnostics.append(
            {"view": det.view, "det_index": n, "status": "ok", "n_clusters": len(clusters)}
        )
    return proposals, diagnostics
