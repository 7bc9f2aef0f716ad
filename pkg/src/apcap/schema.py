"""Keypoint skeleton schemas: built-in families, validation, and file registry.

A schema fixes the keypoint index space every other stage works in: limb
connectivity (a forest of parent->child edges), left/right symmetry pairs,
the facial keypoint group, the spine chain (ordered root->neck), and the
per-keypoint OKS falloff constants.

Schemas are immutable after construction and safe to share across
concurrent pipeline stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

# Uniform OKS falloff used when a schema file or builtin does not override it.
DEFAULT_SIGMA = 0.08

BUILTIN_FAMILIES = ("ap10k17", "animalpose17", "birds23")


class SchemaError(ValueError):
    """Raised when a schema violates a structural invariant."""


class SchemaFileError(ValueError):
    """Raised when a schema file cannot be parsed; carries the line number."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class KeypointSchema:
    """Skeleton definition for one dataset family.

    ``limbs`` are (parent, child) index pairs and must form a forest: no
    cycles, at most one parent per keypoint. ``spine_group`` is ordered from
    root to neck and each consecutive pair must be a limb edge.
    """

    family_id: str
    keypoint_names: tuple[str, ...]
    limbs: tuple[tuple[int, int], ...]
    symmetry_pairs: tuple[tuple[int, int], ...]
    face_group: tuple[int, ...]
    spine_group: tuple[int, ...]
    per_keypoint_sigma: tuple[float, ...] = field(default=())

    def __post_init__(self):
        n = len(self.keypoint_names)
        if n == 0:
            raise SchemaError("schema has no keypoints")
        if len(set(self.keypoint_names)) != n:
            raise SchemaError("keypoint names must be unique")
        if not self.per_keypoint_sigma:
            object.__setattr__(self, "per_keypoint_sigma", (DEFAULT_SIGMA,) * n)
        elif len(self.per_keypoint_sigma) == 1 and n > 1:
            # single value broadcasts to every keypoint
            object.__setattr__(self, "per_keypoint_sigma", self.per_keypoint_sigma * n)
        if len(self.per_keypoint_sigma) != n:
            raise SchemaError("per_keypoint_sigma length must match keypoint count")
        if any(s <= 0 for s in self.per_keypoint_sigma):
            raise SchemaError("per_keypoint_sigma entries must be positive")

        for group, name in (
            (self.face_group, "face_group"),
            (self.spine_group, "spine_group"),
        ):
            for i in group:
                self._check_index(i, name)
            if len(set(group)) != len(group):
                raise SchemaError(f"{name} contains duplicate indices")
        if set(self.face_group) & set(self.spine_group):
            raise SchemaError("face_group and spine_group must be disjoint")

        seen_children: set[int] = set()
        for parent, child in self.limbs:
            self._check_index(parent, "limbs")
            self._check_index(child, "limbs")
            if parent == child:
                raise SchemaError(f"limb ({parent},{child}) is a self-loop")
            if child in seen_children:
                raise SchemaError(f"keypoint {child} has more than one parent limb")
            seen_children.add(child)
        self._check_acyclic()

        touched: set[int] = set()
        for left, right in self.symmetry_pairs:
            self._check_index(left, "symmetry_pairs")
            self._check_index(right, "symmetry_pairs")
            if left == right:
                raise SchemaError(f"symmetry pair ({left},{right}) is degenerate")
            if left in touched or right in touched:
                raise SchemaError("symmetry pairs must be disjoint")
            touched.update((left, right))

        if self.spine_group:
            if len(self.spine_group) < 2:
                raise SchemaError("spine_group must be a chain of length >= 2 or empty")
            limb_set = set(self.limbs)
            for a, b in zip(self.spine_group, self.spine_group[1:]):
                if (a, b) not in limb_set:
                    raise SchemaError(
                        f"spine chain link ({a},{b}) is not a limb edge"
                    )

    def _check_index(self, i: int, where: str) -> None:
        if not 0 <= i < len(self.keypoint_names):
            raise SchemaError(f"{where}: index {i} out of range")

    def _check_acyclic(self) -> None:
        # Unique parents already enforced; a cycle can then only be a directed
        # loop, which walking parent links detects.
        parent_of = {c: p for p, c in self.limbs}
        for start in parent_of:
            seen = {start}
            node = start
            while node in parent_of:
                node = parent_of[node]
                if node in seen:
                    raise SchemaError("limb graph contains a cycle")
                seen.add(node)

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_names)

    def symmetry_permutation(self) -> tuple[int, ...]:
        """Index permutation swapping each symmetry pair; identity elsewhere."""
        perm = list(range(self.n_keypoints))
        for left, right in self.symmetry_pairs:
            perm[left], perm[right] = right, left
        return tuple(perm)

    def children_of(self, index: int) -> tuple[int, ...]:
        return tuple(c for p, c in self.limbs if p == index)

    def descendants_of(self, index: int) -> tuple[int, ...]:
        """All keypoints below ``index`` in the limb forest, excluding it."""
        out: list[int] = []
        stack = list(self.children_of(index))
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(self.children_of(node))
        return tuple(sorted(out))

    def limb_chains(self) -> tuple[tuple[int, ...], ...]:
        """Connected limb components outside the face and spine groups.

        These are the units the limb-shift perturbation moves: for the
        builtin quadruped schemas each chain is one leg.
        """
        excluded = set(self.face_group) | set(self.spine_group)
        nodes = [i for i in range(self.n_keypoints) if i not in excluded]
        adj: dict[int, set[int]] = {i: set() for i in nodes}
        for p, c in self.limbs:
            if p in adj and c in adj:
                adj[p].add(c)
                adj[c].add(p)
        chains: list[tuple[int, ...]] = []
        unvisited = set(nodes)
        for seed in nodes:
            if seed not in unvisited:
                continue
            component = []
            stack = [seed]
            unvisited.discard(seed)
            while stack:
                node = stack.pop()
                component.append(node)
                for nxt in adj[node]:
                    if nxt in unvisited:
                        unvisited.discard(nxt)
                        stack.append(nxt)
            chains.append(tuple(sorted(component)))
        return tuple(sorted(chains))


def _quadruped_schema(family_id: str, names: list[str]) -> KeypointSchema:
    # Shared topology for the two 17-keypoint quadruped families:
    # indices 0-2 face (eyes, nose), 3 neck-like, 4 tail-root, then four
    # 3-keypoint legs. Limbs form a spanning tree rooted at index 4.
    return KeypointSchema(
        family_id=family_id,
        keypoint_names=tuple(names),
        limbs=(
            (4, 3),
            (3, 2), (2, 0), (2, 1),
            (3, 5), (5, 6), (6, 7),
            (3, 8), (8, 9), (9, 10),
            (4, 11), (11, 12), (12, 13),
            (4, 14), (14, 15), (15, 16),
        ),
        symmetry_pairs=((0, 1), (5, 8), (6, 9), (7, 10), (11, 14), (12, 15), (13, 16)),
        face_group=(0, 1, 2),
        spine_group=(4, 3),
    )


def _ap10k17() -> KeypointSchema:
    return _quadruped_schema(
        "ap10k17",
        [
            "left_eye", "right_eye", "nose", "neck", "root_of_tail",
            "left_shoulder", "left_elbow", "left_front_paw",
            "right_shoulder", "right_elbow", "right_front_paw",
            "left_hip", "left_knee", "left_back_paw",
            "right_hip", "right_knee", "right_back_paw",
        ],
    )


def _animalpose17() -> KeypointSchema:
    return _quadruped_schema(
        "animalpose17",
        [
            "left_eye", "right_eye", "nose", "withers", "tail_base",
            "left_front_elbow", "left_front_knee", "left_front_paw",
            "right_front_elbow", "right_front_knee", "right_front_paw",
            "left_back_elbow", "left_back_knee", "left_back_paw",
            "right_back_elbow", "right_back_knee", "right_back_paw",
        ],
    )


def _birds23() -> KeypointSchema:
    names = [
        "head_mid_top", "left_eye", "right_eye",
        "mouth_front_top", "mouth_back_left", "mouth_back_right",
        "mouth_front_bottom",
        "left_shoulder", "right_shoulder",
        "left_elbow", "right_elbow",
        "left_wrist", "right_wrist",
        "torso_mid_back",
        "left_hip", "right_hip",
        "left_knee", "right_knee",
        "left_ankle", "right_ankle",
        "tail_top_back", "tail_mid_back", "tail_end_back",
    ]
    return KeypointSchema(
        family_id="birds23",
        keypoint_names=tuple(names),
        limbs=(
            (20, 13),
            (13, 0),
            (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (3, 6),
            (13, 7), (7, 9), (9, 11),
            (13, 8), (8, 10), (10, 12),
            (13, 14), (14, 16), (16, 18),
            (13, 15), (15, 17), (17, 19),
            (20, 21), (21, 22),
        ),
        symmetry_pairs=(
            (1, 2), (4, 5), (7, 8), (9, 10), (11, 12),
            (14, 15), (16, 17), (18, 19),
        ),
        face_group=(0, 1, 2, 3, 4, 5, 6),
        spine_group=(20, 13),
    )


_BUILTIN_FACTORIES = {
    "ap10k17": _ap10k17,
    "animalpose17": _animalpose17,
    "birds23": _birds23,
}


def builtin_schema(family: str) -> KeypointSchema:
    """Return one of the built-in schemas by family id.

    Valid ids: ``ap10k17`` (17 keypoints), ``animalpose17`` (17 keypoints),
    ``birds23`` (23 keypoints).
    """
    key = family.strip().lower()
    if key not in _BUILTIN_FACTORIES:
        raise KeyError(
            f"unknown schema family {family!r}; "
            f"builtins are {', '.join(BUILTIN_FAMILIES)}"
        )
    return _BUILTIN_FACTORIES[key]()


# ---------------------------------------------------------------------------
# Schema file format
#
# One schema per file, line-oriented `key = value`, '#' starts a comment.
# Keys:
#   family_id      bare identifier
#   keypoints      comma-separated names, in index order
#   limbs          comma-separated `parent>child` index pairs
#   symmetry_pairs comma-separated `left:right` index pairs
#   face_group     comma-separated indices (may be empty)
#   spine_group    comma-separated indices, ordered root->neck (may be empty)
#   sigma          one float (uniform) or one float per keypoint
# ---------------------------------------------------------------------------

_REQUIRED_KEYS = ("family_id", "keypoints")


def parse_schema_text(text: str) -> KeypointSchema:
    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaFileError(lineno, f"expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in values:
            raise SchemaFileError(lineno, f"duplicate key {key!r}")
        values[key] = value.strip()
        lines[key] = lineno

    for key in _REQUIRED_KEYS:
        if key not in values:
            raise SchemaFileError(0, f"missing required key {key!r}")

    def split_list(key: str) -> list[str]:
        raw = values.get(key, "")
        return [item.strip() for item in raw.split(",") if item.strip()]

    def int_list(key: str) -> tuple[int, ...]:
        out = []
        for item in split_list(key):
            try:
                out.append(int(item))
            except ValueError:
                raise SchemaFileError(lines[key], f"{key}: {item!r} is not an integer") from None
        return tuple(out)

    def pair_list(key: str, sep: str) -> tuple[tuple[int, int], ...]:
        out = []
        for item in split_list(key):
            parts = item.split(sep)
            if len(parts) != 2:
                raise SchemaFileError(lines[key], f"{key}: {item!r} is not a `{sep}`-separated pair")
            try:
                out.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise SchemaFileError(lines[key], f"{key}: {item!r} has non-integer indices") from None
        return tuple(out)

    names = tuple(split_list("keypoints"))
    sigma_items = split_list("sigma")
    if not sigma_items:
        sigmas = (DEFAULT_SIGMA,) * len(names)
    else:
        try:
            floats = [float(s) for s in sigma_items]
        except ValueError:
            raise SchemaFileError(lines["sigma"], "sigma entries must be numbers") from None
        sigmas = tuple(floats) * len(names) if len(floats) == 1 else tuple(floats)
        if len(floats) == 1:
            sigmas = (floats[0],) * len(names)

    try:
        return KeypointSchema(
            family_id=values["family_id"],
            keypoint_names=names,
            limbs=pair_list("limbs", ">"),
            symmetry_pairs=pair_list("symmetry_pairs", ":"),
            face_group=int_list("face_group"),
            spine_group=int_list("spine_group"),
            per_keypoint_sigma=sigmas,
        )
    except SchemaError as exc:
        raise SchemaFileError(0, str(exc)) from exc


def schema_to_text(schema: KeypointSchema) -> str:
    """Serialize to the canonical file form; parse_schema_text inverts this."""
    sigmas = schema.per_keypoint_sigma
    if len(set(sigmas)) == 1:
        sigma_str = repr(sigmas[0])
    else:
        sigma_str = ", ".join(repr(s) for s in sigmas)
    return "\n".join(
        [
            f"family_id = {schema.family_id}",
            "keypoints = " + ", ".join(schema.keypoint_names),
            "limbs = " + ", ".join(f"{p}>{c}" for p, c in schema.limbs),
            "symmetry_pairs = " + ", ".join(f"{a}:{b}" for a, b in schema.symmetry_pairs),
            "face_group = " + ", ".join(str(i) for i in schema.face_group),
            "spine_group = " + ", ".join(str(i) for i in schema.spine_group),
            f"sigma = {sigma_str}",
            "",
        ]
    )


def load_schema(selector: str, search_dir: str | Path | None = None) -> KeypointSchema:
    """Resolve a schema by builtin family id or by file path.

    ``search_dir`` optionally names a directory checked for
    ``<selector>.schema`` before treating the selector as a path.
    """
    key = selector.strip().lower()
    if key in _BUILTIN_FACTORIES:
        return _BUILTIN_FACTORIES[key]()
    if search_dir is not None:
        candidate = Path(search_dir) / f"{selector}.schema"
        if candidate.is_file():
            return parse_schema_text(candidate.read_text())
    path = Path(selector)
    if path.is_file():
        return parse_schema_text(path.read_text())
    raise FileNotFoundError(
        f"schema {selector!r} is neither a builtin family nor a readable file"
    )


def write_schema_file(schema: KeypointSchema, directory: str | Path) -> Path:
    out = Path(directory) / f"{schema.family_id}.schema"
    out.write_text(schema_to_text(schema))
    return out
