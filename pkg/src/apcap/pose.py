"""Pose data model: keypoints with visibility, bounding boxes, validation.

Visibility follows the COCO 3-state convention: 0 unlabeled, 1 labeled but
occluded, 2 labeled and visible. Keypoints with v > 0 are "labeled" and are
the only ones perturbation, rendering, screening, and evaluation touch.

Coordinates are continuous pixels; a point is in bounds when
0 <= x <= width and 0 <= y <= height.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .schema import KeypointSchema


class PoseError(ValueError):
    pass


class SchemaMismatchError(PoseError):
    """Two poses (or a pose and a file) disagree on the keypoint layout."""


@dataclass(frozen=True)
class Violation:
    """One validation failure; ``keypoint`` is None for pose-level rules."""

    rule: str
    keypoint: int | None = None

    def __str__(self) -> str:
        if self.keypoint is None:
            return self.rule
        return f"{self.rule}(k={self.keypoint})"


@dataclass(frozen=True)
class Pose:
    schema: KeypointSchema
    points: tuple[tuple[float, float, int], ...]
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.points) != self.schema.n_keypoints:
            raise PoseError(
                f"pose has {len(self.points)} points, schema "
                f"{self.schema.family_id!r} expects {self.schema.n_keypoints}"
            )
        for i, (_, _, v) in enumerate(self.points):
            if v not in (0, 1, 2):
                raise PoseError(f"keypoint {i} has visibility {v}, expected 0/1/2")
        if len(self.bbox) != 4:
            raise PoseError("bbox must be (x, y, w, h)")

    @classmethod
    def from_arrays(
        cls,
        schema: KeypointSchema,
        xy: np.ndarray,
        visibility: np.ndarray,
        bbox: tuple[float, float, float, float],
    ) -> "Pose":
        xy = np.asarray(xy, dtype=float)
        visibility = np.asarray(visibility)
        points = tuple(
            (float(x), float(y), int(v)) for (x, y), v in zip(xy, visibility)
        )
        return cls(schema=schema, points=points, bbox=tuple(float(b) for b in bbox))

    def xy(self) -> np.ndarray:
        """(N, 2) float64 coordinate array."""
        return np.array([(x, y) for x, y, _ in self.points], dtype=float)

    def visibility(self) -> np.ndarray:
        return np.array([v for _, _, v in self.points], dtype=int)

    def labeled_mask(self) -> np.ndarray:
        return self.visibility() > 0

    def n_labeled(self) -> int:
        return int(self.labeled_mask().sum())

    def with_points(self, xy: np.ndarray, visibility: np.ndarray | None = None) -> "Pose":
        vis = self.visibility() if visibility is None else visibility
        return Pose.from_arrays(self.schema, xy, vis, self.bbox)

    def with_bbox(self, bbox: tuple[float, float, float, float]) -> "Pose":
        return Pose(self.schema, self.points, tuple(float(b) for b in bbox))

    def bbox_diagonal(self) -> float:
        return math.hypot(self.bbox[2], self.bbox[3])

    def tight_bbox(self, pad: float = 0.0) -> tuple[float, float, float, float]:
        """Axis-aligned box around the labeled keypoints, padded on all sides."""
        mask = self.labeled_mask()
        if not mask.any():
            raise PoseError("tight_bbox needs at least one labeled keypoint")
        pts = self.xy()[mask]
        x0, y0 = pts.min(axis=0)
        x1, y1 = pts.max(axis=0)
        return (
            float(x0 - pad),
            float(y0 - pad),
            float(x1 - x0 + 2 * pad),
            float(y1 - y0 + 2 * pad),
        )


class Provenance(enum.Enum):
    REAL = "real"
    MF = "mf"
    PA = "pa"
    CE = "ce"


@dataclass(frozen=True)
class AnnotatedSample:
    """One dataset atom: an image reference with its pose annotation."""

    image_ref: str
    pose: Pose
    category: str
    provenance: Provenance
    prompt_used: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.provenance is Provenance.REAL and (
            self.prompt_used is not None or self.seed is not None
        ):
            raise PoseError("real samples must not carry prompt_used or seed")

    def dedupe_key(self) -> tuple:
        return (self.image_ref, self.pose.points)


def validate_pose(pose: Pose, image_size: tuple[float, float]) -> list[Violation]:
    """Check labeled keypoints against image bounds and the bbox for area.

    Violations are data, not faults: an empty list means the pose is valid
    within ``image_size`` = (width, height).
    """
    width, height = image_size
    out: list[Violation] = []
    for i, (x, y, v) in enumerate(pose.points):
        if v > 0 and not (0.0 <= x <= width and 0.0 <= y <= height):
            out.append(Violation("OutOfBounds", i))
    _, _, bw, bh = pose.bbox
    if bw <= 0 or bh <= 0:
        out.append(Violation("DegenerateBox"))
    return out


def bone_lengths(pose: Pose) -> list[tuple[tuple[int, int], float]]:
    """Euclidean length of each limb whose endpoints are both labeled."""
    xy = pose.xy()
    vis = pose.visibility()
    out: list[tuple[tuple[int, int], float]] = []
    for parent, child in pose.schema.limbs:
        if vis[parent] > 0 and vis[child] > 0:
            out.append(((parent, child), float(np.linalg.norm(xy[child] - xy[parent]))))
    return out


def normalize_to_canvas(
    pose: Pose,
    canvas_size: tuple[int, int],
    margin: float = 0.1,
) -> Pose:
    """Map a pose into canvas coordinates by bbox crop-and-resize.

    The bounding box is scaled (aspect preserved) to fit the canvas minus a
    relative ``margin`` on each side, and centered. Keypoints and bbox get
    the same affine map, so down-stream rendering and screening all operate
    at generation resolution.
    """
    cw, ch = canvas_size
    bx, by, bw, bh = pose.bbox
    if bw <= 0 or bh <= 0:
        raise PoseError("cannot normalize a pose with a degenerate bbox")
    avail_w = cw * (1.0 - 2.0 * margin)
    avail_h = ch * (1.0 - 2.0 * margin)
    scale = min(avail_w / bw, avail_h / bh)
    new_w, new_h = bw * scale, bh * scale
    off_x = (cw - new_w) / 2.0
    off_y = (ch - new_h) / 2.0

    xy = pose.xy()
    mapped = np.empty_like(xy)
    mapped[:, 0] = (xy[:, 0] - bx) * scale + off_x
    mapped[:, 1] = (xy[:, 1] - by) * scale + off_y
    new_pose = pose.with_points(mapped).with_bbox((off_x, off_y, new_w, new_h))
    return new_pose
