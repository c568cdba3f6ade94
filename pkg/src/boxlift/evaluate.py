"""Pseudo-label quality metrics: matching, average precision, box errors.

Predictions are matched greedily per scene in descending score order; each
prediction may claim the best still-unmatched ground-truth box of its own
category that meets the criterion (3D IoU above a threshold, or center
distance below one). Average precision uses the all-points interpolated
precision envelope, integrated by trapezoid (duplicate recall points make
that exactly the envelope's step area).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError
from .geom import Box3D, iou_3d
from .scene import Category


@dataclass(frozen=True)
class MatchCriterion:
    """Either kind="iou" with a minimum 3D IoU, or kind="center" with a
    maximum center distance in meters."""

    kind: str = "iou"
    threshold: float = 0.25

    def __post_init__(self) -> None:
        if self.kind not in ("iou", "center"):
            raise ConfigError(f"match criterion kind must be 'iou' or 'center', got {self.kind!r}")
        if self.threshold <= 0:
            raise ConfigError("match criterion threshold must be positive")


@dataclass
class Prediction:
    box: Box3D
    category: str
    score: float


@dataclass
class MatchResult:
    """pairs holds (prediction index, gt index, 3D IoU), in descending
    prediction-score order; every gt is matched at most once."""

    pairs: list[tuple[int, int, float]]
    unmatched_predictions: list[int]
    unmatched_gt: list[int]


def match(
    predictions: list[Prediction],
    gts: list[tuple[Box3D, str]],
    criterion: MatchCriterion = MatchCriterion(),
) -> MatchResult:
    """Greedy score-descending matching within categories."""
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].score, i))
    taken = [False] * len(gts)
    pairs: list[tuple[int, int, float]] = []
    unmatched_pred: list[int] = []
    for pi in order:
        pred = predictions[pi]
        best_gi = -1
        best_measure = None
        for gi, (gt_box, gt_cat) in enumerate(gts):
            if taken[gi] or gt_cat != pred.category:
                continue
            if criterion.kind == "iou":
                iou = iou_3d(pred.box, gt_box)
                if iou < criterion.threshold:
                    continue
                # prefer higher IoU; ties go to the lower gt index
                if best_measure is None or iou > best_measure:
                    best_measure, best_gi = iou, gi
            else:
                dist = math.dist(pred.box.center, gt_box.center)
                if dist > criterion.threshold:
                    continue
                if best_measure is None or dist < best_measure:
                    best_measure, best_gi = dist, gi
        if best_gi >= 0:
            taken[best_gi] = True
            pairs.append((pi, best_gi, iou_3d(pred.box, gts[best_gi][0])))
        else:
            unmatched_pred.append(pi)
    unmatched_gt = [gi for gi, t in enumerate(taken) if not t]
    return MatchResult(pairs, sorted(unmatched_pred), unmatched_gt)


def average_precision(scored_hits: list[tuple[float, bool]], n_gt: int) -> float:
    """All-points interpolated AP from (score, is_true_positive) rows.

    Rows are ranked by descending score (stable); precision is replaced by
    its running maximum over higher recalls and integrated by trapezoid,
    with a recall-0 anchor.
    """
    if n_gt <= 0 or not scored_hits:
        return 0.0
    order = sorted(range(len(scored_hits)), key=lambda i: (-scored_hits[i][0], i))
    tp = np.array([1.0 if scored_hits[i][1] else 0.0 for i in order])
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[envelope[0]], envelope])
    ap = float(np.trapezoid(p, r))
    return min(max(ap, 0.0), 1.0)


@dataclass
class MetricsReport:
    """Per-category AP plus pooled box-error statistics."""

    per_category_ap: dict[str, float]
    mean_ap: float
    n_gt: dict[str, int]
    n_predictions: dict[str, int]
    center_error_mean: float
    center_error_median: float
    size_error_mean: float
    size_error_median: float
    yaw_error_deg_mean: float
    yaw_error_deg_median: float
    n_matched: int
    iou_histogram: list[int] = field(default_factory=list)
    pr_curves: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_category_ap": self.per_category_ap,
            "mean_ap": self.mean_ap,
            "n_gt": self.n_gt,
            "n_predictions": self.n_predictions,
            "errors": {
                "center_mean_m": self.center_error_mean,
                "center_median_m": self.center_error_median,
                "size_rel_mean": self.size_error_mean,
                "size_rel_median": self.size_error_median,
                "yaw_deg_mean": self.yaw_error_deg_mean,
                "yaw_deg_median": self.yaw_error_deg_median,
                "n_matched": self.n_matched,
            },
            "iou_histogram": self.iou_histogram,
        }

    def format_table(self) -> str:
        lines = [f"{'category':<22} {'AP':>8} {'gt':>6} {'pred':>6}"]
        for name in sorted(self.per_category_ap):
            lines.append(
                f"{name:<22} {self.per_category_ap[name]:>8.4f} "
                f"{self.n_gt.get(name, 0):>6d} {self.n_predictions.get(name, 0):>6d}"
            )
        lines.append(f"{'mAP':<22} {self.mean_ap:>8.4f}")
        lines.append(
            f"center err mean/median: {self.center_error_mean:.3f}/{self.center_error_median:.3f} m | "
            f"size rel err: {self.size_error_mean:.3f}/{self.size_error_median:.3f} | "
            f"yaw err: {self.yaw_error_deg_mean:.2f}/{self.yaw_error_deg_median:.2f} deg "
            f"({self.n_matched} matched)"
        )
        return "\n".join(lines)


def yaw_error_deg(a: float, b: float) -> float:
    """Yaw difference folded modulo pi, in degrees."""
    d = abs(a - b) % math.pi
    return math.degrees(min(d, math.pi - d))


def box_error_stats(pairs: Iterable[tuple[Box3D, Box3D]]) -> dict[str, float]:
    """Center L2, mean per-axis relative size error, folded yaw error."""
    centers, sizes, yaws = [], [], []
    for pred, gt in pairs:
        centers.append(math.dist(pred.center, gt.center))
        rel = [abs(p - g) / g for p, g in zip(pred.size, gt.size)]
        sizes.append(sum(rel) / 3.0)
        yaws.append(yaw_error_deg(pred.yaw, gt.yaw))
    if not centers:
        return {
            "center_mean": 0.0,
            "center_median": 0.0,
            "size_mean": 0.0,
            "size_median": 0.0,
            "yaw_mean": 0.0,
            "yaw_median": 0.0,
            "n": 0,
        }
    return {
        "center_mean": float(np.mean(centers)),
        "center_median": float(np.median(centers)),
        "size_mean": float(np.mean(sizes)),
        "size_median": float(np.median(sizes)),
        "yaw_mean": float(np.mean(yaws)),
        "yaw_median": float(np.median(yaws)),
        "n": len(centers),
    }


def evaluate_corpus(
    scene_predictions: list[list[Prediction]],
    scene_gts: list[list[tuple[Box3D, Category]]],
    criterion: MatchCriterion = MatchCriterion(),
    categories: Optional[Iterable[str]] = None,
) -> MetricsReport:
    """Corpus-level report over per-scene prediction/gt lists.

    AP pools predictions across scenes per category after per-scene
    matching; mAP averages over the categories (restricted to `categories`
    when given) that have at least one ground-truth instance.
    """
    if len(scene_predictions) != len(scene_gts):
        raise ConfigError("prediction and gt scene lists differ in length")
    cat_filter = set(categories) if categories is not None else None

    pooled: dict[str, list[tuple[float, bool]]] = {}
    n_gt: dict[str, int] = {}
    n_pred: dict[str, int] = {}
    matched_pairs: list[tuple[Box3D, Box3D]] = []
    ious: list[float] = []

    for preds, gts in zip(scene_predictions, scene_gts):
        if cat_filter is not None:
            preds = [p for p in preds if p.category in cat_filter]
            gts = [(b, c) for b, c in gts if c.name in cat_filter]
        gt_named = [(b, c.name) for b, c in gts]
        for _, cname in gt_named:
            n_gt[cname] = n_gt.get(cname, 0) + 1
        for p in preds:
            n_pred[p.category] = n_pred.get(p.category, 0) + 1
        result = match(preds, gt_named, criterion)
        hit = {pi for pi, _, _ in result.pairs}
        for pi, p in enumerate(preds):
            pooled.setdefault(p.category, []).append((p.score, pi in hit))
        for pi, gi, iou in result.pairs:
            matched_pairs.append((preds[pi].box, gt_named[gi][0]))
            ious.append(iou)

    per_cat_ap = {
        name: average_precision(pooled.get(name, []), count)
        for name, count in sorted(n_gt.items())
    }
    mean_ap = float(np.mean(list(per_cat_ap.values()))) if per_cat_ap else 0.0
    stats = box_error_stats(matched_pairs)
    hist, _ = np.histogram(ious, bins=10, range=(0.0, 1.0))

    pr_curves: dict[str, list[tuple[float, float]]] = {}
    for name, rows in pooled.items():
        if n_gt.get(name, 0) == 0 or not rows:
            continue
        order = sorted(range(len(rows)), key=lambda i: (-rows[i][0], i))
        tp = np.cumsum([1.0 if rows[i][1] else 0.0 for i in order])
        fp = np.cumsum([0.0 if rows[i][1] else 1.0 for i in order])
        rec = tp / n_gt[name]
        prec = tp / np.maximum(tp + fp, 1e-12)
        pr_curves[name] = [(float(r), float(p)) for r, p in zip(rec, prec)]

    return MetricsReport(
        per_category_ap=per_cat_ap,
        mean_ap=mean_ap,
        n_gt=n_gt,
        n_predictions=n_pred,
        center_error_mean=stats["center_mean"],
        center_error_median=stats["center_median"],
        size_error_mean=stats["size_mean"],
        size_error_median=stats["size_median"],
        yaw_error_deg_mean=stats["yaw_mean"],
        yaw_error_deg_median=stats["yaw_median"],
        n_matched=stats["n"],
        iou_histogram=hist.tolist(),
        pr_curves=pr_curves,
    )
