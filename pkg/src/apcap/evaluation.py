"""Pose evaluation: OKS-based mean average precision and PCK@0.05.

mAP follows the COCO keypoint protocol: per (image, category) greedy matching
of score-descending predictions to unmatched ground truths at each OKS
threshold in {0.50, 0.55, ..., 0.95}, then 101-point interpolated
precision-recall integration per category, averaged over thresholds and
categories. Score ties are broken by a content digest so the result is
invariant to the order predictions arrive in.

Ground-truth instances with zero labeled keypoints are dropped before
matching (they can be neither matched nor missed); categories with no
remaining ground truth are excluded from the averages.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .pose import AnnotatedSample, Pose, PoseError
from .screening import oks

OKS_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class EvalError(PoseError):
    pass


class EmptyGroundTruthError(EvalError):
    pass


class LengthMismatchError(EvalError):
    pass


@dataclass(frozen=True)
class PredInstance:
    """One predicted pose, addressed to a ground-truth image and category."""

    image_ref: str
    category: str
    pose: Pose
    score: float


@dataclass(frozen=True)
class EvalReport:
    metric: str  # "map" or "pck05"
    overall: float
    per_threshold: dict = field(default_factory=dict)
    per_category: dict = field(default_factory=dict)
    n_instances: int = 0

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric,
            "overall": self.overall,
            "per_threshold": {f"{t:.2f}": v for t, v in sorted(self.per_threshold.items())},
            "per_category": dict(sorted(self.per_category.items())),
            "n_instances": self.n_instances,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def _content_key(p: PredInstance) -> str:
    h = hashlib.sha256()
    h.update(p.image_ref.encode())
    h.update(b"\x00")
    h.update(p.category.encode())
    h.update(b"\x00")
    h.update(np.asarray([(x, y, v) for x, y, v in p.pose.points], dtype=np.float64).tobytes())
    h.update(np.float64(p.score).tobytes())
    return h.hexdigest()


def _gt_samples(gts) -> list[AnnotatedSample]:
    samples = getattr(gts, "samples", gts)
    return list(samples)


def average_precision(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP given per-detection scores and TP flags.

    Detections must already be sorted by descending score. ``n_gt`` is the
    number of matchable ground-truth instances.
    """
    if n_gt == 0:
        return 0.0
    if len(scores) == 0:
        return 0.0
    tp = np.cumsum(is_tp.astype(np.float64))
    fp = np.cumsum((~is_tp).astype(np.float64))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    # Envelope: precision at recall r is the max precision at recall >= r.
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    inds = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    valid = inds < len(precision)
    q[valid] = precision[inds[valid]]
    return float(q.mean())


def map_oks(preds: list[PredInstance], gts) -> EvalReport:
    """COCO-style keypoint mAP over OKS thresholds 0.50:0.05:0.95."""
    gt_samples = [s for s in _gt_samples(gts) if s.pose.n_labeled() > 0]
    if not gt_samples:
        raise EmptyGroundTruthError("no ground-truth instance has labeled keypoints")

    gt_by_group: dict[tuple[str, str], list[AnnotatedSample]] = {}
    for s in gt_samples:
        gt_by_group.setdefault((s.image_ref, s.category), []).append(s)
    pred_by_group: dict[tuple[str, str], list[PredInstance]] = {}
    for p in preds:
        pred_by_group.setdefault((p.image_ref, p.category), []).append(p)

    categories = sorted({s.category for s in gt_samples})
    ap: dict[str, dict[float, float]] = {c: {} for c in categories}

    for cat in categories:
        groups = [g for g in gt_by_group if g[1] == cat]
        n_gt = sum(len(gt_by_group[g]) for g in groups)
        # Per-group OKS matrices and score-ordered predictions, reused
        # across thresholds.
        prepared = []
        for g in groups:
            g_gts = gt_by_group[g]
            g_preds = sorted(
                pred_by_group.get(g, ()), key=lambda p: (-p.score, _content_key(p))
            )
            mat = np.array(
                [[oks(p.pose, s.pose) for s in g_gts] for p in g_preds], dtype=np.float64
            )
            prepared.append((g_preds, mat))
        # Predictions addressed to images with no gt of this category are
        # pure false positives.
        stray = [
            p
            for g, plist in pred_by_group.items()
            if g[1] == cat and g not in gt_by_group
            for p in plist
        ]
        for thr in OKS_THRESHOLDS:
            rows: list[tuple[float, str, bool]] = []
            for g_preds, mat in prepared:
                matched: set[int] = set()
                for di, p in enumerate(g_preds):
                    best, best_oks = -1, thr
                    for gi in range(mat.shape[1]):
                        if gi in matched:
                            continue
                        if mat[di, gi] >= best_oks:
                            best, best_oks = gi, mat[di, gi]
                    if best >= 0:
                        matched.add(best)
                        rows.append((p.score, _content_key(p), True))
                    else:
                        rows.append((p.score, _content_key(p), False))
            rows.extend((p.score, _content_key(p), False) for p in stray)
            rows.sort(key=lambda r: (-r[0], r[1]))
            scores = np.array([r[0] for r in rows])
            is_tp = np.array([r[2] for r in rows], dtype=bool)
            ap[cat][thr] = average_precision(scores, is_tp, n_gt)

    per_category = {c: float(np.mean([ap[c][t] for t in OKS_THRESHOLDS])) for c in categories}
    per_threshold = {
        t: float(np.mean([ap[c][t] for c in categories])) for t in OKS_THRESHOLDS
    }
    overall = float(np.mean(list(per_threshold.values())))
    return EvalReport(
        metric="map",
        overall=overall,
        per_threshold=per_threshold,
        per_category=per_category,
        n_instances=len(gt_samples),
    )


def pck05(
    preds: list[Pose],
    gts,
    threshold_fraction: float = 0.05,
    normalizer: str = "bbox_max",
) -> EvalReport:
    """Fraction of labeled keypoints within threshold_fraction of the
    instance's reference length.

    Predictions correspond to ground truths by position. The reference length
    is max(bbox_w, bbox_h) by default ("bbox_max"); "bbox_diag" selects the
    bbox diagonal instead. A distance exactly equal to the threshold counts
    as correct.
    """
    gt_samples = _gt_samples(gts)
    if len(preds) != len(gt_samples):
        raise LengthMismatchError(f"{len(preds)} predictions vs {len(gt_samples)} gts")
    if normalizer not in ("bbox_max", "bbox_diag"):
        raise EvalError(f"unknown normalizer {normalizer!r}")

    total_correct = 0
    total_labeled = 0
    by_cat: dict[str, list[int]] = {}
    n_scored_instances = 0
    for pred, sample in zip(preds, gt_samples):
        gt = sample.pose
        if pred.schema != gt.schema:
            raise LengthMismatchError("prediction schema differs from ground truth")
        labeled = gt.labeled_mask()
        if not labeled.any():
            continue
        n_scored_instances += 1
        bw, bh = gt.bbox[2], gt.bbox[3]
        ref = max(bw, bh) if normalizer == "bbox_max" else float(np.hypot(bw, bh))
        thr = threshold_fraction * ref
        d = np.sqrt(((pred.xy() - gt.xy()) ** 2).sum(axis=1))
        correct = int(((d <= thr) & labeled).sum())
        n_lab = int(labeled.sum())
        total_correct += correct
        total_labeled += n_lab
        cat = by_cat.setdefault(sample.category, [0, 0])
        cat[0] += correct
        cat[1] += n_lab
    overall = (total_correct / total_labeled) if total_labeled else 0.0
    per_category = {c: (v[0] / v[1]) if v[1] else 0.0 for c, v in sorted(by_cat.items())}
    return EvalReport(
        metric="pck05",
        overall=overall,
        per_threshold={},
        per_category=per_category,
        n_instances=n_scored_instances,
    )
