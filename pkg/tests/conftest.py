"""Shared test helpers: schemas and randomized pose generators."""

from __future__ import annotations

import numpy as np
import pytest

from apcap.pose import AnnotatedSample, Pose, Provenance
from apcap.schema import KeypointSchema, builtin_schema


@pytest.fixture(scope="session")
def ap10k():
    return builtin_schema("ap10k17")


@pytest.fixture(scope="session")
def birds():
    return builtin_schema("birds23")


def micro_schema(n: int = 3, family_id: str = "micro") -> KeypointSchema:
    """Tiny chain schema for targeted tests (no face or spine groups)."""
    return KeypointSchema(
        family_id=f"{family_id}{n}",
        keypoint_names=tuple(f"kp{i}" for i in range(n)),
        limbs=tuple((i, i + 1) for i in range(n - 1)),
        symmetry_pairs=(),
        face_group=(),
        spine_group=(),
        per_keypoint_sigma=(0.08,) * n,
    )


def scatter_pose(
    schema: KeypointSchema,
    rng: np.random.Generator,
    image_size: tuple[int, int] = (256, 256),
    margin: float = 20.0,
    min_sep: float = 0.0,
    label_prob: float = 1.0,
    bbox_pad: float = 10.0,
) -> Pose:
    """Random pose with keypoints scattered inside the image.

    ``min_sep`` enforces a minimum pairwise distance (rejection sampling);
    ``label_prob`` drops keypoints to v=0, always keeping at least one.
    """
    w, h = image_size
    n = schema.n_keypoints
    pts = np.empty((n, 2))
    for k in range(n):
        for _ in range(1000):
            cand = rng.uniform([margin, margin], [w - margin, h - margin])
            if min_sep <= 0.0 or k == 0:
                pts[k] = cand
                break
            if np.sqrt(((pts[:k] - cand) ** 2).sum(axis=1)).min() >= min_sep:
                pts[k] = cand
                break
        else:
            raise RuntimeError("could not place keypoints at requested separation")
    vis = (rng.uniform(size=n) < label_prob).astype(int) * 2
    if vis.sum() == 0:
        vis[int(rng.integers(n))] = 2
    x0, y0 = pts.min(axis=0) - bbox_pad
    x1, y1 = pts.max(axis=0) + bbox_pad
    return Pose.from_arrays(schema, pts, vis, (x0, y0, x1 - x0, y1 - y0))


def real_sample(
    schema: KeypointSchema,
    rng: np.random.Generator,
    ref: str,
    category: str = "zebra",
    **pose_kwargs,
) -> AnnotatedSample:
    return AnnotatedSample(
        image_ref=ref,
        pose=scatter_pose(schema, rng, **pose_kwargs),
        category=category,
        provenance=Provenance.REAL,
    )
