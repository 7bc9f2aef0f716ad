"""Conditioning signals for the image generator: pose maps and text prompts.

Pose maps come in two styles. SkeletonLines draws each limb as a fixed-width
colored line and each labeled keypoint as a filled disc, using a per-schema
palette with exact (non-antialiased) colors so a decoder can recover keypoint
positions from the raster. Heatmap renders per-keypoint Gaussians summed into
three channel groups (face, spine, everything else).

Prompts come from a single template with named descriptor slots plus the
mandatory ``{category}`` slot. Train mode keeps the template fixed and blanks
the descriptor slots; Infer mode draws a descriptor per slot and randomly
permutes which drawn word lands in which slot position.
"""

from __future__ import annotations

import colorsys
import enum
import io
import string
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .pose import Pose
from .schema import KeypointSchema

LINE_WIDTH = 3
MARKER_RADIUS = 3
# Heatmap Gaussian width in px at a 256-px canvas, scaled linearly with size.
HEATMAP_SIGMA_AT_256 = 2.0
# Minimum pairwise L-inf distance between palette colors, and from background.
_MIN_COLOR_GAP = 8
_BG = (0, 0, 0)


class ConditioningError(ValueError):
    pass


class EmptyPoseError(ConditioningError):
    pass


class UnknownSlotError(ConditioningError):
    pass


class MapStyle(enum.Enum):
    SKELETON_LINES = "skeleton_lines"
    HEATMAP = "heatmap"


@dataclass(frozen=True)
class Palette:
    """Exact-valued marker and limb colors for one schema."""

    keypoint_colors: tuple[tuple[int, int, int], ...]
    limb_colors: tuple[tuple[int, int, int], ...]


def _color_candidates():
    # 24 hues x 5 saturation/value rings, high-value first so everything is
    # far from the black background.
    rings = ((1.0, 1.0), (0.55, 1.0), (1.0, 0.66), (0.62, 0.85), (0.8, 0.5))
    for s, v in rings:
        for i in range(24):
            r, g, b = colorsys.hsv_to_rgb(i / 24.0, s, v)
            yield (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def _linf(a: tuple[int, int, int], b: tuple[int, int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]), abs(a[2] - b[2]))


def build_palette(schema: KeypointSchema) -> Palette:
    """Deterministic palette: greedy pick over an HSV wheel, keeping every
    pair of colors (and the background) at L-inf distance >= 8."""
    need = schema.n_keypoints + len(schema.limbs)
    chosen: list[tuple[int, int, int]] = []
    for cand in _color_candidates():
        if _linf(cand, _BG) < 6 * _MIN_COLOR_GAP:
            continue
        if all(_linf(cand, c) >= _MIN_COLOR_GAP for c in chosen):
            chosen.append(cand)
            if len(chosen) == need:
                break
    if len(chosen) < need:
        raise ConditioningError(
            f"palette exhausted: need {need} colors, found {len(chosen)}"
        )
    return Palette(
        keypoint_colors=tuple(chosen[: schema.n_keypoints]),
        limb_colors=tuple(chosen[schema.n_keypoints : need]),
    )


@dataclass(frozen=True, eq=False)
class PoseMap:
    width: int
    height: int
    style: MapStyle
    pixels: np.ndarray  # uint8, shape (height, width, 3)

    def to_png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    @classmethod
    def from_png_bytes(cls, data: bytes, style: MapStyle) -> "PoseMap":
        arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
        return cls(width=arr.shape[1], height=arr.shape[0], style=style, pixels=arr)


def render_pose_map(
    pose: Pose,
    size: tuple[int, int],
    style: MapStyle,
    palette: Palette | None = None,
) -> PoseMap:
    """Rasterize the pose at the given (width, height).

    The pose is drawn where its coordinates fall; apply
    ``pose.normalize_to_canvas`` first if bbox-crop framing is wanted.
    Keypoints closer together than two marker radii occlude each other in
    SkeletonLines style, which degrades decode accuracy for those joints.
    """
    w, h = int(size[0]), int(size[1])
    if w <= 0 or h <= 0:
        raise ConditioningError(f"bad raster size {size}")
    if pose.n_labeled() == 0:
        raise EmptyPoseError("pose has no labeled keypoints")
    if palette is None:
        palette = build_palette(pose.schema)
    xy = pose.xy()
    vis = pose.visibility()
    if style is MapStyle.SKELETON_LINES:
        img = Image.new("RGB", (w, h), _BG)
        draw = ImageDraw.Draw(img)
        for li, (a, b) in enumerate(pose.schema.limbs):
            if vis[a] > 0 and vis[b] > 0:
                draw.line(
                    [tuple(np.round(xy[a]).astype(int)), tuple(np.round(xy[b]).astype(int))],
                    fill=palette.limb_colors[li],
                    width=LINE_WIDTH,
                )
        r = MARKER_RADIUS
        for k in range(pose.schema.n_keypoints):
            if vis[k] > 0:
                cx, cy = int(round(xy[k, 0])), int(round(xy[k, 1]))
                draw.ellipse(
                    [cx - r, cy - r, cx + r, cy + r],
                    fill=palette.keypoint_colors[k],
                )
        pixels = np.asarray(img, dtype=np.uint8)
    elif style is MapStyle.HEATMAP:
        sigma = HEATMAP_SIGMA_AT_256 * min(w, h) / 256.0
        canvas = np.zeros((h, w, 3), dtype=np.float64)
        face = set(pose.schema.face_group)
        spine = set(pose.schema.spine_group)
        reach = int(np.ceil(4.0 * sigma))
        for k in range(pose.schema.n_keypoints):
            if vis[k] == 0:
                continue
            x, y = xy[k]
            x0, x1 = max(0, int(x) - reach), min(w, int(x) + reach + 2)
            y0, y1 = max(0, int(y) - reach), min(h, int(y) + reach + 2)
            if x0 >= x1 or y0 >= y1:
                continue
            xs = np.arange(x0, x1, dtype=np.float64)
            ys = np.arange(y0, y1, dtype=np.float64)
            g = np.exp(
                -(((xs[None, :] - x) ** 2) + ((ys[:, None] - y) ** 2)) / (2.0 * sigma**2)
            )
            ch = 0 if k in face else 1 if k in spine else 2
            canvas[y0:y1, x0:x1, ch] += g
        pixels = (np.clip(canvas, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    else:
        raise ConditioningError(f"unknown style {style!r}")
    return PoseMap(width=w, height=h, style=style, pixels=pixels)


def decode_keypoints(
    pixels: np.ndarray,
    schema: KeypointSchema,
    palette: Palette | None = None,
) -> list[tuple[float, float] | None]:
    """Recover keypoint positions from a SkeletonLines-style raster.

    Returns the exact-color centroid per keypoint, or None when no pixel
    carries that keypoint's palette color.
    """
    if palette is None:
        palette = build_palette(schema)
    out: list[tuple[float, float] | None] = []
    arr = np.asarray(pixels)
    for color in palette.keypoint_colors:
        mask = np.all(arr == np.array(color, dtype=arr.dtype), axis=2)
        ys, xs = np.nonzero(mask)
        if len(xs) == 0:
            out.append(None)
        else:
            out.append((float(xs.mean()), float(ys.mean())))
    return out


# ---------------------------------------------------------------------------
# Prompts

DEFAULT_TEMPLATE = "A {appearance} {category} {action} is in the background"

DEFAULT_DESCRIPTOR_POOLS: dict[str, tuple[str, ...]] = {
    "appearance": ("spotted", "striped", "slender", "shaggy", "young"),
    "action": ("standing", "walking", "resting", "grazing", "turning"),
}

DEFAULT_QUESTION_VARIANTS = (
    "Describe the animal and its surroundings in one sentence.",
    "What is the animal in this image doing?",
    "Write a short caption for this photograph.",
    "Summarize the scene, mentioning the animal's posture.",
)


class PromptMode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


def _template_slots(template: str) -> list[str]:
    slots = []
    for _, name, _, _ in string.Formatter().parse(template):
        if name is not None:
            if name == "" or any(ch in name for ch in ".["):
                raise UnknownSlotError(f"malformed slot {name!r} in template")
            slots.append(name)
    return slots


@dataclass(frozen=True)
class PromptSpec:
    """Template + descriptor pools for one animal category."""

    category: str
    template: str = DEFAULT_TEMPLATE
    descriptor_pools: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_DESCRIPTOR_POOLS)
    )
    question_variants: tuple[str, ...] = DEFAULT_QUESTION_VARIANTS
    rng_seed: int = 0

    def __post_init__(self):
        if not self.category:
            raise ConditioningError("category must be nonempty")
        slots = _template_slots(self.template)
        if slots.count("category") != 1:
            raise UnknownSlotError("template must use {category} exactly once")
        # A slot with no pool entry is just an always-blank slot; a pool for a
        # slot the template never mentions is a misconfiguration.
        for name in self.descriptor_pools:
            if name == "category" or name not in slots:
                raise UnknownSlotError(f"descriptor pool names unknown slot {name!r}")

    def descriptor_slots(self) -> list[str]:
        return [s for s in _template_slots(self.template) if s != "category"]


def _cleanup(text: str) -> str:
    return " ".join(text.split())


def make_prompt(
    spec: PromptSpec,
    mode: PromptMode,
    rng: np.random.Generator | None = None,
) -> str:
    """Render one prompt.

    Train mode substitutes the category and blanks every descriptor slot,
    giving the fixed minimal sentence. Infer mode draws one descriptor per
    slot (uniformly from that slot's pool), then applies a random permutation
    over the slot positions so drawn words land in shuffled order; the
    category is never part of the shuffle. Slots with empty pools stay blank.
    """
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    slots = spec.descriptor_slots()
    values = {name: "" for name in slots}
    if mode is PromptMode.INFER and slots:
        drawn: list[str] = []
        filled: list[str] = []
        for name in slots:
            pool = spec.descriptor_pools.get(name, ())
            if pool:
                drawn.append(pool[int(rng.integers(len(pool)))])
                filled.append(name)
        if drawn:
            order = rng.permutation(len(drawn))
            for name, j in zip(filled, order):
                values[name] = drawn[int(j)]
    return _cleanup(spec.template.format(category=spec.category, **values))


def make_caption_request(
    image_ref: str,
    question_variants: tuple[str, ...] | list[str],
    rng: np.random.Generator | None = None,
) -> str:
    """Pick one caption-eliciting instruction uniformly at random.

    The returned string is what gets sent to the captioning endpoint for
    ``image_ref``; this function itself never touches the network.
    """
    if not question_variants:
        raise ConditioningError("question_variants must be nonempty")
    if rng is None:
        rng = np.random.default_rng(0)
    return question_variants[int(rng.integers(len(question_variants)))]
