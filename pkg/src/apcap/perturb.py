"""Geometric pose perturbations: face move, limb shift, joint flex, back rotate.

All four operations are pure functions over an immutable input pose plus an
explicit numpy Generator, so callers can parallelize across samples with
per-sample derived seeds. Unlabeled keypoints (v = 0) are never moved.

Displacement caps:
  * face move       one rigid translation, norm <= face_move_max
  * limb shift      per keypoint, norm <= 0.5 * d_nn(k)
  * joint flex      per keypoint, accumulated chord <= 0.5 * d_nn(k)
where d_nn(k) is the distance from keypoint k to its nearest labeled
neighbor in the input pose. Joint flex and back rotate are built from exact
rotations, so bone and spine-link lengths survive to ~1e-15 relative; the
per-keypoint displacement clamp is enforced by restricting rotation angles
rather than by scaling displacement vectors, which would bend bones.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .pose import Pose, validate_pose

# Fallback offset cap, as a fraction of the bbox diagonal, for a keypoint
# with no labeled neighbor (d_nn undefined).
_LONE_KEYPOINT_CAP = 0.25


class PerturbError(ValueError):
    pass


class NoFaceGroupError(PerturbError):
    pass


class NoSpineGroupError(PerturbError):
    pass


class Op(enum.Enum):
    FACE_MOVE = "face_move"
    LIMB_SHIFT = "limb_shift"
    JOINT_FLEX = "joint_flex"
    BACK_ROTATE = "back_rotate"


# Fixed composition order for perturb(); listed ops always apply in this order.
OP_ORDER = (Op.FACE_MOVE, Op.LIMB_SHIFT, Op.JOINT_FLEX, Op.BACK_ROTATE)


@dataclass(frozen=True)
class PerturbConfig:
    """Magnitude bounds for the four operations.

    ``face_move_max`` is in pixels; None means 5% of the pose bbox diagonal.
    ``close_limb_threshold`` is the fraction of the bbox diagonal below which
    two limb chains count as closely spaced and shift together.
    """

    face_move_max: float | None = None
    joint_flex_max_deg: float = 15.0
    back_rotate_max_deg: float = 10.0
    close_limb_threshold: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.face_move_max is not None and self.face_move_max < 0:
            raise PerturbError("face_move_max must be >= 0")
        if self.joint_flex_max_deg < 0 or self.back_rotate_max_deg < 0:
            raise PerturbError("rotation magnitudes must be >= 0")
        if not 0.0 < self.close_limb_threshold < 1.0:
            raise PerturbError("close_limb_threshold must be in (0, 1)")

    def resolved_face_move_max(self, pose: Pose) -> float:
        if self.face_move_max is not None:
            return self.face_move_max
        return 0.05 * pose.bbox_diagonal()


def nearest_labeled_distances(pose: Pose) -> np.ndarray:
    """d_nn per keypoint: distance to the nearest other labeled keypoint.

    Entries are +inf for unlabeled keypoints and when no other labeled
    keypoint exists.
    """
    xy = pose.xy()
    labeled = pose.labeled_mask()
    n = len(xy)
    d_nn = np.full(n, np.inf)
    idx = np.flatnonzero(labeled)
    if len(idx) < 2:
        return d_nn
    pts = xy[idx]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    d_nn[idx] = dist.min(axis=1)
    return d_nn


def _disc_offset(rng: np.random.Generator, radius: float) -> np.ndarray:
    # Uniform over the closed disc of the given radius.
    theta = rng.uniform(0.0, 2.0 * math.pi)
    r = radius * math.sqrt(rng.uniform(0.0, 1.0))
    return np.array([r * math.cos(theta), r * math.sin(theta)])


def _rotate_about(xy: np.ndarray, rows: np.ndarray, pivot: np.ndarray, angle: float) -> None:
    c, s = math.cos(angle), math.sin(angle)
    rel = xy[rows] - pivot
    xy[rows, 0] = pivot[0] + c * rel[:, 0] - s * rel[:, 1]
    xy[rows, 1] = pivot[1] + s * rel[:, 0] + c * rel[:, 1]


def face_move(pose: Pose, cfg: PerturbConfig, rng: np.random.Generator) -> Pose:
    """Translate the whole facial group by one shared random offset.

    Rigid by construction: intra-face relative positions are preserved, and
    every non-face keypoint is returned untouched.
    """
    face = pose.schema.face_group
    if not face:
        raise NoFaceGroupError(f"schema {pose.schema.family_id!r} has no face group")
    offset = _disc_offset(rng, cfg.resolved_face_move_max(pose))
    xy = pose.xy()
    vis = pose.visibility()
    rows = np.array([i for i in face if vis[i] > 0], dtype=int)
    if len(rows):
        xy[rows] += offset
    return pose.with_points(xy)


def _chain_min_gap(xy: np.ndarray, a_rows: np.ndarray, b_rows: np.ndarray) -> float:
    diff = xy[a_rows][:, None, :] - xy[b_rows][None, :, :]
    return float(np.sqrt((diff**2).sum(axis=2)).min())


def limb_shift(pose: Pose, cfg: PerturbConfig, rng: np.random.Generator) -> Pose:
    """Shift limb chains: rigidly when chains are close, per-keypoint otherwise.

    A chain whose labeled keypoints come within close_limb_threshold of the
    bbox diagonal of any other chain is translated as a whole (offset capped
    so every member stays within its 0.5 * d_nn budget). Widely spaced chains
    get an independent offset per keypoint, capped at 0.5 * d_nn(k).
    """
    chains = pose.schema.limb_chains()
    if not chains:
        raise PerturbError(
            f"schema {pose.schema.family_id!r} has no limb chains outside face/spine"
        )
    xy = pose.xy()
    vis = pose.visibility()
    d_nn = nearest_labeled_distances(pose)
    gap_threshold = cfg.close_limb_threshold * pose.bbox_diagonal()
    fallback_cap = _LONE_KEYPOINT_CAP * pose.bbox_diagonal()

    def cap_for(k: int) -> float:
        return 0.5 * d_nn[k] if math.isfinite(d_nn[k]) else fallback_cap

    labeled_rows = [
        np.array([i for i in chain if vis[i] > 0], dtype=int) for chain in chains
    ]
    out = xy.copy()
    for ci, rows in enumerate(labeled_rows):
        if len(rows) == 0:
            continue
        min_gap = math.inf
        for cj, other in enumerate(labeled_rows):
            if cj == ci or len(other) == 0:
                continue
            min_gap = min(min_gap, _chain_min_gap(xy, rows, other))
        if min_gap < gap_threshold:
            shared_cap = min(cap_for(int(k)) for k in rows)
            out[rows] += _disc_offset(rng, shared_cap)
        else:
            for k in rows:
                out[k] += _disc_offset(rng, cap_for(int(k)))
    return pose.with_points(out)


def joint_flex(pose: Pose, cfg: PerturbConfig, rng: np.random.Generator) -> Pose:
    """Rotate each limb's subtree about its parent joint by a random angle.

    Limbs are processed root-down so descendants inherit ancestor rotations.
    Each keypoint carries a displacement budget of 0.5 * d_nn(k); the angle
    drawn at a joint is limited so no keypoint in the subtree can exceed its
    remaining budget (chord bound, conservative via the triangle inequality).
    """
    chains = pose.schema.limb_chains()
    if not chains:
        raise PerturbError(
            f"schema {pose.schema.family_id!r} has no limb chains outside face/spine"
        )
    schema = pose.schema
    xy = pose.xy()
    vis = pose.visibility()
    d_nn = nearest_labeled_distances(pose)
    fallback_cap = _LONE_KEYPOINT_CAP * pose.bbox_diagonal()
    budget = np.where(np.isfinite(d_nn), 0.5 * d_nn, fallback_cap)
    used = np.zeros_like(budget)
    excluded = set(schema.face_group) | set(schema.spine_group)
    max_angle = math.radians(cfg.joint_flex_max_deg)

    # BFS order over the limb forest, deterministic.
    children = {i: sorted(schema.children_of(i)) for i in range(schema.n_keypoints)}
    child_set = {c for _, c in schema.limbs}
    roots = sorted(i for i in range(schema.n_keypoints) if i not in child_set)
    queue = list(roots)
    order: list[tuple[int, int]] = []
    while queue:
        node = queue.pop(0)
        for c in children[node]:
            order.append((node, c))
            queue.append(c)

    for parent, child in order:
        if child in excluded:
            continue
        if vis[parent] == 0 or vis[child] == 0:
            continue
        subtree = [child] + [k for k in schema.descendants_of(child) if vis[k] > 0]
        pivot = xy[parent].copy()
        radii = np.linalg.norm(xy[subtree] - pivot, axis=1)
        theta_cap = max_angle
        for k, r in zip(subtree, radii):
            if r <= 0.0:
                continue
            remaining = max(0.0, budget[k] - used[k])
            theta_cap = min(theta_cap, 2.0 * math.asin(min(1.0, remaining / (2.0 * r))))
        angle = rng.uniform(-theta_cap, theta_cap) if theta_cap > 0 else 0.0
        _rotate_about(xy, np.array(subtree, dtype=int), pivot, angle)
        used[subtree] += 2.0 * radii * abs(math.sin(angle / 2.0))
    return pose.with_points(xy)


def back_rotate(pose: Pose, cfg: PerturbConfig, rng: np.random.Generator) -> Pose:
    """Rotate the spine chain about its root keypoint by a random angle."""
    spine = pose.schema.spine_group
    if len(spine) < 2:
        raise NoSpineGroupError(
            f"schema {pose.schema.family_id!r} has no spine chain of length >= 2"
        )
    xy = pose.xy()
    vis = pose.visibility()
    root = spine[0]
    if vis[root] == 0:
        return pose  # no reliable pivot
    rows = np.array([i for i in spine[1:] if vis[i] > 0], dtype=int)
    angle = rng.uniform(
        -math.radians(cfg.back_rotate_max_deg), math.radians(cfg.back_rotate_max_deg)
    )
    if len(rows):
        _rotate_about(xy, rows, xy[root].copy(), angle)
    return pose.with_points(xy)


_OP_FUNCS = {
    Op.FACE_MOVE: face_move,
    Op.LIMB_SHIFT: limb_shift,
    Op.JOINT_FLEX: joint_flex,
    Op.BACK_ROTATE: back_rotate,
}

# Initial draw plus this many re-draws before an op is skipped for a sample.
_MAX_REDRAWS = 8


@dataclass(frozen=True)
class PerturbResult:
    pose: Pose
    applied: tuple[Op, ...] = ()
    skipped: tuple[Op, ...] = ()
    attempts: dict = field(default_factory=dict)

    def audit_record(self) -> dict:
        return {
            "applied": [op.value for op in self.applied],
            "skipped": [op.value for op in self.skipped],
            "attempts": {op.value: n for op, n in self.attempts.items()},
        }


def perturb(
    pose: Pose,
    cfg: PerturbConfig,
    ops: set[Op] | frozenset[Op],
    rng: np.random.Generator | None = None,
    *,
    image_size: tuple[float, float],
) -> PerturbResult:
    """Apply the requested ops in fixed order, keeping the pose in bounds.

    An op whose result falls out of ``image_size`` is re-drawn up to eight
    times and then skipped for this sample; skips are reported in the result
    for the caller's audit log. With ``rng`` omitted a generator is seeded
    from ``cfg.rng_seed``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    current = pose
    applied: list[Op] = []
    skipped: list[Op] = []
    attempts: dict[Op, int] = {}
    for op in OP_ORDER:
        if op not in ops:
            continue
        func = _OP_FUNCS[op]
        done = False
        for attempt in range(1 + _MAX_REDRAWS):
            candidate = func(current, cfg, rng)
            if not validate_pose(candidate, image_size):
                current = candidate
                applied.append(op)
                attempts[op] = attempt + 1
                done = True
                break
        if not done:
            skipped.append(op)
            attempts[op] = 1 + _MAX_REDRAWS
    return PerturbResult(
        pose=current, applied=tuple(applied), skipped=tuple(skipped), attempts=attempts
    )
