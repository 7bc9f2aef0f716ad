"""Dataset assembly, cross-domain splitting, balanced batching, COCO JSON IO.

In-domain assembly binds the hybrid ratio per real sample: each real sample
contributes six synthetic descendants (two per strategy), so the manifest is
always exactly 1 real : 6 synthetic. Cross-domain splits put every
source-category sample plus synthetic target-category samples in train, and
only real target-category samples in test.

Persistence uses COCO keypoint JSON (images / annotations / categories with
flat [x, y, v] keypoint triples). Per-annotation provenance, prompt, and seed
live under the vendor-extension key "apcap", which standard COCO tools
ignore. Floats survive the round trip exactly (shortest-repr encoding).
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator

import numpy as np

from .pose import AnnotatedSample, Pose, PoseError, Provenance, SchemaMismatchError
from .schema import BUILTIN_FAMILIES, KeypointSchema, builtin_schema


class DatasetError(PoseError):
    pass


class RatioViolationError(DatasetError):
    pass


class UnknownCategoryError(DatasetError):
    pass


class BadBatchSizeError(DatasetError):
    pass


class ParseError(DatasetError):
    def __init__(self, reason: str, line: int | None = None):
        self.reason = reason
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{reason}{where}")


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class DatasetManifest:
    subset_id: str
    samples: tuple[AnnotatedSample, ...]
    split: Split
    provenance_counts: dict
    seed: int
    image_sizes: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        derived = _count_provenance(self.samples)
        if dict(self.provenance_counts) != derived:
            raise DatasetError(
                f"provenance_counts {self.provenance_counts} != derived {derived}"
            )
        seen = set()
        for s in self.samples:
            key = s.dedupe_key()
            if key in seen:
                raise DatasetError(f"duplicate sample for image {s.image_ref!r}")
            seen.add(key)

    @classmethod
    def build(
        cls,
        subset_id: str,
        samples: Iterable[AnnotatedSample],
        split: Split,
        seed: int,
        image_sizes: dict | None = None,
    ) -> "DatasetManifest":
        samples = tuple(samples)
        return cls(
            subset_id=subset_id,
            samples=samples,
            split=split,
            provenance_counts=_count_provenance(samples),
            seed=seed,
            image_sizes=dict(image_sizes or {}),
        )

    def __len__(self) -> int:
        return len(self.samples)

    def categories(self) -> list[str]:
        return sorted({s.category for s in self.samples})

    def image_refs(self) -> set[str]:
        return {s.image_ref for s in self.samples}


def _count_provenance(samples: Iterable[AnnotatedSample]) -> dict:
    counts: dict[Provenance, int] = {}
    for s in samples:
        counts[s.provenance] = counts.get(s.provenance, 0) + 1
    return counts


@dataclass(frozen=True)
class CrossDomainSpec:
    source_categories: frozenset
    target_categories: frozenset
    source_ratio: Fraction = Fraction(1, 3)

    def __post_init__(self):
        object.__setattr__(self, "source_categories", frozenset(self.source_categories))
        object.__setattr__(self, "target_categories", frozenset(self.target_categories))
        overlap = self.source_categories & self.target_categories
        if overlap:
            raise DatasetError(f"categories in both domains: {sorted(overlap)[:5]}")
        if not 0 < self.source_ratio < 1:
            raise DatasetError("source_ratio must be strictly between 0 and 1")

    def domain_of(self, category: str) -> str:
        if category in self.source_categories:
            return "source"
        if category in self.target_categories:
            return "target"
        raise UnknownCategoryError(f"category {category!r} in neither domain")


SYNTH_STRATEGIES = (Provenance.MF, Provenance.PA, Provenance.CE)
GROUPS_PER_STRATEGY = 2


def assemble_in_domain(
    real: list[AnnotatedSample],
    synth_per_strategy: dict,
    subset_id: str = "in-domain",
    split: Split = Split.TRAIN,
    seed: int = 0,
    image_sizes: dict | None = None,
) -> DatasetManifest:
    """Combine real samples with exactly two same-sized groups per strategy.

    ``synth_per_strategy`` maps each of MF, PA, CE to a sequence of two
    sample lists; every group must have exactly len(real) samples, keeping
    the real:synthetic ratio at 1:6 by construction.
    """
    n = len(real)
    ordered: list[AnnotatedSample] = list(real)
    for strat in SYNTH_STRATEGIES:
        groups = synth_per_strategy.get(strat) or synth_per_strategy.get(strat.value)
        if groups is None or len(groups) != GROUPS_PER_STRATEGY:
            raise RatioViolationError(
                f"strategy {strat.value} needs exactly {GROUPS_PER_STRATEGY} groups"
            )
        for gi, group in enumerate(groups):
            if len(group) != n:
                raise RatioViolationError(
                    f"strategy {strat.value} group {gi} has {len(group)} samples, "
                    f"expected {n}"
                )
            for s in group:
                if s.provenance is not strat:
                    raise DatasetError(
                        f"sample of provenance {s.provenance.value} in {strat.value} group"
                    )
            ordered.extend(group)
    for s in real:
        if s.provenance is not Provenance.REAL:
            raise DatasetError("non-real sample in the real list")
    return DatasetManifest.build(subset_id, ordered, split, seed, image_sizes)


def split_cross_domain(
    samples: Iterable[AnnotatedSample],
    spec: CrossDomainSpec,
    seed: int = 0,
    subset_id: str = "cross-domain",
) -> tuple[DatasetManifest, DatasetManifest]:
    """Train on everything source plus synthetic target; test on real target.

    No real target-category sample ever reaches the train side.
    """
    train: list[AnnotatedSample] = []
    test: list[AnnotatedSample] = []
    for s in samples:
        domain = spec.domain_of(s.category)
        if domain == "source":
            train.append(s)
        elif s.provenance is Provenance.REAL:
            test.append(s)
        else:
            train.append(s)
    return (
        DatasetManifest.build(f"{subset_id}-train", train, Split.TRAIN, seed),
        DatasetManifest.build(f"{subset_id}-test", test, Split.TEST, seed),
    )


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{epoch}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def balanced_batches(
    manifest: DatasetManifest,
    spec: CrossDomainSpec,
    batch_size: int,
    seed: int = 0,
    epochs: int = 1,
) -> Iterator[list[AnnotatedSample]]:
    """Yield batches holding batch_size/3 source and 2*batch_size/3 target
    samples, drawn without replacement within each epoch.

    Each epoch reshuffles both pools from (seed, epoch); batches stop when
    either pool can no longer fill its share, so every emitted batch is exact.
    Within a batch, source samples precede target samples.
    """
    if batch_size < 3 or batch_size % 3 != 0:
        raise BadBatchSizeError(f"batch_size must be a positive multiple of 3, got {batch_size}")
    n_src = batch_size // 3
    n_tgt = 2 * batch_size // 3
    source = [s for s in manifest.samples if spec.domain_of(s.category) == "source"]
    target = [s for s in manifest.samples if spec.domain_of(s.category) == "target"]
    for epoch in range(epochs):
        rng = _epoch_rng(seed, epoch)
        src_order = rng.permutation(len(source))
        tgt_order = rng.permutation(len(target))
        n_batches = min(len(source) // n_src, len(target) // n_tgt)
        for b in range(n_batches):
            batch = [source[i] for i in src_order[b * n_src : (b + 1) * n_src]]
            batch += [target[i] for i in tgt_order[b * n_tgt : (b + 1) * n_tgt]]
            yield batch


# ---------------------------------------------------------------------------
# COCO keypoint JSON

_VENDOR_KEY = "apcap"


def _resolve_read_schema(names: list[str], skeleton_hint, schema: KeypointSchema | None):
    if schema is not None:
        if list(schema.keypoint_names) != names:
            raise SchemaMismatchError(
                f"file keypoints {names[:3]}... do not match schema "
                f"{schema.family_id!r}"
            )
        return schema
    for family in BUILTIN_FAMILIES:
        cand = builtin_schema(family)
        if list(cand.keypoint_names) == names:
            return cand
    raise ParseError(
        "keypoint names match no builtin schema; pass the schema explicitly"
    )


def write_coco(manifest: DatasetManifest, path) -> None:
    """Serialize a manifest as COCO keypoint JSON with stable key order."""
    if len(manifest.samples) == 0:
        doc = {
            "info": {_VENDOR_KEY: _manifest_info(manifest)},
            "images": [],
            "annotations": [],
            "categories": [],
        }
        _dump(doc, path)
        return
    schema = manifest.samples[0].pose.schema
    for s in manifest.samples:
        if s.pose.schema != schema:
            raise SchemaMismatchError("manifest mixes keypoint schemas")

    cat_ids = {name: i + 1 for i, name in enumerate(manifest.categories())}
    image_ids: dict[str, int] = {}
    images = []
    for s in manifest.samples:
        if s.image_ref not in image_ids:
            image_ids[s.image_ref] = len(image_ids) + 1
            w, h = manifest.image_sizes.get(s.image_ref, (0, 0))
            images.append(
                {
                    "id": image_ids[s.image_ref],
                    "file_name": s.image_ref,
                    "width": int(w),
                    "height": int(h),
                }
            )
    annotations = []
    for ai, s in enumerate(manifest.samples, start=1):
        flat: list[float | int] = []
        for x, y, v in s.pose.points:
            flat.extend((x, y, int(v)))
        ext: dict = {"provenance": s.provenance.value}
        if s.prompt_used is not None:
            ext["prompt"] = s.prompt_used
        if s.seed is not None:
            ext["seed"] = s.seed
        annotations.append(
            {
                "id": ai,
                "image_id": image_ids[s.image_ref],
                "category_id": cat_ids[s.category],
                "keypoints": flat,
                "num_keypoints": s.pose.n_labeled(),
                "bbox": list(s.pose.bbox),
                "area": s.pose.bbox[2] * s.pose.bbox[3],
                "iscrowd": 0,
                _VENDOR_KEY: ext,
            }
        )
    categories = [
        {
            "id": cid,
            "name": name,
            "supercategory": "animal",
            "keypoints": list(schema.keypoint_names),
            "skeleton": [[a + 1, b + 1] for a, b in schema.limbs],
        }
        for name, cid in cat_ids.items()
    ]
    doc = {
        "info": {_VENDOR_KEY: _manifest_info(manifest)},
        "images": images,
        "annotations": annotations,
        "categories": categories,
    }
    _dump(doc, path)


def _manifest_info(manifest: DatasetManifest) -> dict:
    return {
        "subset_id": manifest.subset_id,
        "split": manifest.split.value,
        "seed": manifest.seed,
        "schema": (
            manifest.samples[0].pose.schema.family_id if manifest.samples else None
        ),
    }


def _dump(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_coco(path, schema: KeypointSchema | None = None) -> DatasetManifest:
    """Parse COCO keypoint JSON back into a manifest.

    The keypoint layout is resolved against the builtin families by name
    unless an explicit schema is given.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    for key in ("images", "annotations", "categories"):
        if key not in doc or not isinstance(doc[key], list):
            raise ParseError(f"missing or non-list {key!r} section")

    info = (doc.get("info") or {}).get(_VENDOR_KEY, {})
    subset_id = info.get("subset_id", "imported")
    split = Split(info.get("split", "train"))
    seed = int(info.get("seed", 0))

    images_by_id: dict[int, dict] = {}
    image_sizes: dict[str, tuple[int, int]] = {}
    for im in doc["images"]:
        images_by_id[im["id"]] = im
        image_sizes[im["file_name"]] = (int(im.get("width", 0)), int(im.get("height", 0)))

    cats_by_id: dict[int, dict] = {c["id"]: c for c in doc["categories"]}
    resolved: KeypointSchema | None = None
    if doc["categories"]:
        names0 = list(doc["categories"][0].get("keypoints", ()))
        for c in doc["categories"]:
            if list(c.get("keypoints", ())) != names0:
                raise ParseError("categories disagree on keypoint names")
        resolved = _resolve_read_schema(names0, doc["categories"][0].get("skeleton"), schema)
    elif doc["annotations"]:
        raise ParseError("annotations present but no categories section")

    samples: list[AnnotatedSample] = []
    for ann in doc["annotations"]:
        if ann["image_id"] not in images_by_id:
            raise ParseError(f"annotation {ann.get('id')} references unknown image")
        if ann["category_id"] not in cats_by_id:
            raise ParseError(f"annotation {ann.get('id')} references unknown category")
        flat = ann.get("keypoints", [])
        assert resolved is not None
        n = resolved.n_keypoints
        if len(flat) != 3 * n:
            raise SchemaMismatchError(
                f"annotation {ann.get('id')}: {len(flat)} keypoint values, "
                f"expected {3 * n}"
            )
        points = tuple(
            (float(flat[3 * i]), float(flat[3 * i + 1]), int(flat[3 * i + 2]))
            for i in range(n)
        )
        pose = Pose(schema=resolved, points=points, bbox=tuple(float(b) for b in ann["bbox"]))
        ext = ann.get(_VENDOR_KEY, {})
        provenance = Provenance(ext.get("provenance", "real"))
        samples.append(
            AnnotatedSample(
                image_ref=images_by_id[ann["image_id"]]["file_name"],
                pose=pose,
                category=cats_by_id[ann["category_id"]]["name"],
                provenance=provenance,
                prompt_used=ext.get("prompt"),
                seed=ext.get("seed"),
            )
        )
    return DatasetManifest(
        subset_id=subset_id,
        samples=tuple(samples),
        split=split,
        provenance_counts=_count_provenance(samples),
        seed=seed,
        image_sizes=image_sizes,
    )
