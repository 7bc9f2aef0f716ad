"""Sample screening: thresholded keypoint loss and OKS-based acceptance.

``filter_loss`` is the reusable loss-mask utility: per-keypoint losses above
the threshold are zeroed out of the total so bad keypoints cannot pollute a
downstream trainer. ``screen_sample`` applies the same idea at dataset level,
accepting a generated sample only when the pose re-detected from the image
agrees with the conditioning pose at OKS >= oks_accept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .pose import AnnotatedSample, Pose, PoseError, SchemaMismatchError


class ScreeningError(PoseError):
    pass


class NoLabeledKeypointsError(ScreeningError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    epsilon: float = 0.1
    oks_accept: float = 0.7

    def __post_init__(self):
        if self.epsilon < 0:
            raise ScreeningError("epsilon must be >= 0")
        if not 0.0 <= self.oks_accept <= 1.0:
            raise ScreeningError("oks_accept must be in [0, 1]")


def default_per_kp_loss(gt: Pose) -> Callable[[np.ndarray, np.ndarray], float]:
    """Squared Euclidean error normalized by the gt bbox diagonal (squared),
    so the loss is invariant to uniform rescaling of the instance."""
    diag2 = gt.bbox_diagonal() ** 2
    if diag2 <= 0.0:
        raise ScreeningError("gt bbox has no extent")

    def loss(pred_xy: np.ndarray, gt_xy: np.ndarray) -> float:
        d = pred_xy - gt_xy
        return float(d[0] * d[0] + d[1] * d[1]) / diag2

    return loss


def filter_loss(
    pred: Pose,
    gt: Pose,
    per_kp_loss: Callable[[np.ndarray, np.ndarray], float],
    epsilon: float,
) -> tuple[float, list[bool]]:
    """Total loss over keypoints whose individual loss is <= epsilon.

    Returns (total, mask) where mask has one entry per schema keypoint: True
    iff that keypoint contributed to the total. Keypoints unlabeled in the
    ground truth are excluded from the sum and masked False.
    """
    if pred.schema != gt.schema:
        raise SchemaMismatchError(
            f"pred schema {pred.schema.family_id!r} != gt schema {gt.schema.family_id!r}"
        )
    pred_xy = pred.xy()
    gt_xy = gt.xy()
    gt_vis = gt.visibility()
    total = 0.0
    mask: list[bool] = []
    for k in range(gt.schema.n_keypoints):
        if gt_vis[k] == 0:
            mask.append(False)
            continue
        lk = float(per_kp_loss(pred_xy[k], gt_xy[k]))
        if lk <= epsilon:
            total += lk
            mask.append(True)
        else:
            mask.append(False)
    return total, mask


def oks(pred: Pose, gt: Pose) -> float:
    """Object keypoint similarity between a predicted and ground-truth pose.

    Mean over gt-labeled keypoints of exp(-d_k^2 / (2 * s^2 * sigma_k^2)),
    with s^2 the gt bbox area and sigma_k the schema's per-keypoint spread.
    Predicted visibility flags are ignored; only coordinates count.
    """
    if pred.schema != gt.schema:
        raise SchemaMismatchError(
            f"pred schema {pred.schema.family_id!r} != gt schema {gt.schema.family_id!r}"
        )
    gt_vis = gt.visibility()
    labeled = gt_vis > 0
    n = int(labeled.sum())
    if n == 0:
        raise NoLabeledKeypointsError("gt pose has no labeled keypoints")
    area = gt.bbox[2] * gt.bbox[3]
    if area <= 0.0:
        raise ScreeningError("gt bbox area must be positive")
    d2 = ((pred.xy() - gt.xy()) ** 2).sum(axis=1)
    sigma = np.asarray(gt.schema.per_keypoint_sigma)
    e = d2[labeled] / (2.0 * area * sigma[labeled] ** 2)
    return float(np.exp(-e).mean())


@dataclass(frozen=True)
class Decision:
    """Accept/reject outcome carrying the OKS that produced it."""

    accept: bool
    oks_value: float
    threshold: float

    @property
    def reason(self) -> str | None:
        if self.accept:
            return None
        return f"oks {self.oks_value:.6f} below threshold {self.threshold:.6f}"


def screen_sample(sample: AnnotatedSample, redetected: Pose, cfg: FilterConfig) -> Decision:
    """Accept iff oks(redetected, sample.pose) >= cfg.oks_accept.

    Equality accepts: a sample sitting exactly on the threshold is kept.
    """
    value = oks(redetected, sample.pose)
    return Decision(accept=value >= cfg.oks_accept, oks_value=value, threshold=cfg.oks_accept)


def screen_batch(
    samples: list[AnnotatedSample],
    redetected: list[Pose],
    cfg: FilterConfig,
) -> list[Decision]:
    if len(samples) != len(redetected):
        raise ScreeningError(
            f"{len(samples)} samples but {len(redetected)} redetected poses"
        )
    return [screen_sample(s, r, cfg) for s, r in zip(samples, redetected)]


def summarize(decisions: list[Decision]) -> dict:
    """Counts and mean OKS for a screening pass, JSON-ready."""
    n = len(decisions)
    accepted = sum(1 for d in decisions if d.accept)
    mean_oks = float(np.mean([d.oks_value for d in decisions])) if n else math.nan
    return {
        "total": n,
        "accepted": accepted,
        "rejected": n - accepted,
        "acceptance_rate": (accepted / n) if n else None,
        "mean_oks": None if n == 0 else mean_oks,
    }
