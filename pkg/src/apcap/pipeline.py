"""End-to-end synthesis orchestration and overlay rendering.

For every real input sample, six generation requests are prepared (two
prompt groups for each of the three strategies), dispatched through the
backend's bounded-concurrency batch path, screened against the conditioning
pose, and assembled into manifests:

  manifest_full.json      real + all 6 * n synthetic, pre-screening (1:6)
  manifest_accepted.json  real + synthetic samples that passed screening
  manifest_rejected.json  synthetic samples that failed screening
  audit.jsonl             one record per synthetic sample
  summary.json            counts, acceptance rate, wall time

Every per-sample seed derives from (global seed, image_ref, strategy,
group), so outputs are byte-identical across runs with the same config and
any one sample can be regenerated in isolation. Wall time appears only in
summary.json, never in manifests.
"""

from __future__ import annotations

import hashlib
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .backend import (
    BackendError,
    GenRequest,
    GenResponse,
    Strategy,
    build_backend,
    generate_batch,
    redetect_joints,
)
from .conditioning import (
    LINE_WIDTH,
    MARKER_RADIUS,
    MapStyle,
    Palette,
    PromptMode,
    PromptSpec,
    build_palette,
    make_caption_request,
    make_prompt,
    render_pose_map,
)
from .config import PipelineConfig
from .dataset import DatasetManifest, Split, assemble_in_domain, write_coco
from .perturb import OP_ORDER, perturb
from .pose import AnnotatedSample, Pose, Provenance, normalize_to_canvas
from .screening import Decision, screen_sample
from .schema import KeypointSchema

STRATEGY_ORDER = (Strategy.MF, Strategy.PA, Strategy.CE)
PROVENANCE_OF = {
    Strategy.MF: Provenance.MF,
    Strategy.PA: Provenance.PA,
    Strategy.CE: Provenance.CE,
}


class PipelineError(RuntimeError):
    """Stage-tagged failure; ``stage`` names the pipeline step that died."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class MissingImageError(PipelineError):
    def __init__(self, ref: str):
        self.ref = ref
        super().__init__("viz", f"image not found: {ref}")


def derive_seed(global_seed: int, image_ref: str, strategy: str, group: int) -> int:
    digest = hashlib.sha256(
        f"{global_seed}\x00{image_ref}\x00{strategy}\x00{group}".encode()
    ).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class PlannedRequest:
    index: int
    source: AnnotatedSample
    strategy: Strategy
    group: int
    seed: int
    prompt: str
    pose_used: Pose
    request: GenRequest
    perturb_audit: dict | None = None


@dataclass
class SynthesisReport:
    n_real: int
    n_synthetic: int
    n_accepted: int
    n_rejected: int
    mean_oks: float | None
    wall_time_s: float
    out_dir: str
    backend_id: str | None

    @property
    def acceptance_rate(self) -> float | None:
        if self.n_synthetic == 0:
            return None
        return self.n_accepted / self.n_synthetic


def _image_bytes_for(sample: AnnotatedSample, cfg: PipelineConfig, palette: Palette) -> bytes:
    """Bytes of the sample's source image, for captioning.

    Falls back to the sample's own rendered pose map when the image file is
    not on disk, so annotation-only corpora still run end to end; the mock
    captioner only fingerprints the bytes anyway.
    """
    if cfg.images_dir:
        path = Path(cfg.images_dir) / sample.image_ref
        if path.is_file():
            return path.read_bytes()
    normalized = normalize_to_canvas(sample.pose, cfg.resolution)
    return render_pose_map(
        normalized, cfg.resolution, MapStyle.SKELETON_LINES, palette
    ).to_png_bytes()


def plan_requests(
    samples: list[AnnotatedSample],
    cfg: PipelineConfig,
    schema: KeypointSchema,
    backend,
    palette: Palette,
    log=None,
) -> list[PlannedRequest]:
    """Build the 6-per-sample request list (MF, PA, CE x 2 prompt groups)."""
    planned: list[PlannedRequest] = []
    index = 0
    for sample in samples:
        normalized = normalize_to_canvas(sample.pose, cfg.resolution)
        prompt_spec = PromptSpec(
            category=sample.category,
            template=cfg.prompt.template,
            descriptor_pools=dict(cfg.prompt.descriptor_pools),
            question_variants=tuple(cfg.prompt.question_variants),
        )
        for strategy in STRATEGY_ORDER:
            for group in range(2):
                seed = derive_seed(cfg.seed, sample.image_ref, strategy.value, group)
                rng = np.random.default_rng(seed)
                audit = None
                caption = None
                if strategy is Strategy.MF:
                    pose_used = normalized
                    prompt = make_prompt(prompt_spec, PromptMode.INFER, rng)
                elif strategy is Strategy.PA:
                    result = perturb(
                        normalized,
                        cfg.perturb,
                        set(OP_ORDER),
                        rng,
                        image_size=cfg.resolution,
                    )
                    pose_used = result.pose
                    audit = result.audit_record()
                    prompt = make_prompt(prompt_spec, PromptMode.INFER, rng)
                else:
                    pose_used = normalized
                    instruction = make_caption_request(
                        sample.image_ref, prompt_spec.question_variants, rng
                    )
                    try:
                        caption = backend.caption(
                            _image_bytes_for(sample, cfg, palette), instruction
                        )
                    except BackendError as e:
                        raise PipelineError("genbackend", f"captioning failed: {e}")
                    prompt = caption
                pose_map = None
                if strategy is not Strategy.CE or cfg.screening.ce_use_pose_map:
                    pose_map = render_pose_map(
                        pose_used, cfg.resolution, cfg.pose_map_style, palette
                    )
                planned.append(
                    PlannedRequest(
                        index=index,
                        source=sample,
                        strategy=strategy,
                        group=group,
                        seed=seed,
                        prompt=prompt,
                        pose_used=pose_used,
                        request=GenRequest(
                            strategy=strategy,
                            prompt=prompt,
                            seed=seed,
                            resolution=cfg.resolution,
                            category=sample.category,
                            pose_map=pose_map,
                            caption=caption,
                        ),
                        perturb_audit=audit,
                    )
                )
                index += 1
    return planned


def _synthetic_ref(plan: PlannedRequest) -> str:
    stem = Path(plan.source.image_ref).stem or "sample"
    return f"synth/{plan.strategy.value}{plan.group}/{stem}-{plan.seed}.png"


def synthesize(
    real: list[AnnotatedSample],
    cfg: PipelineConfig,
    schema: KeypointSchema,
    backend=None,
    log=None,
) -> SynthesisReport:
    """Run generation, screening, and assembly; write artifacts to out_dir."""
    t0 = time.perf_counter()
    log = log or (lambda event, **kw: None)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    palette = build_palette(schema)
    if backend is None:
        try:
            backend = build_backend(cfg.backend, schema=schema)
        except Exception as e:
            raise PipelineError("genbackend", str(e))

    for s in real:
        if s.provenance is not Provenance.REAL:
            raise PipelineError(
                "input", f"sample {s.image_ref!r} has provenance {s.provenance.value}"
            )
        if s.pose.schema != schema:
            raise PipelineError("input", f"sample {s.image_ref!r} uses another schema")

    if not real:
        log("synthesize.empty_input")
        empty = DatasetManifest.build("synth-full", [], Split.TRAIN, cfg.seed)
        for name in ("manifest_full.json", "manifest_accepted.json", "manifest_rejected.json"):
            write_coco(empty, out_dir / name)
        (out_dir / "audit.jsonl").write_text("")
        report = SynthesisReport(0, 0, 0, 0, None, time.perf_counter() - t0, str(out_dir), None)
        _write_summary(out_dir, report, {})
        return report

    log("synthesize.plan", n_real=len(real))
    planned = plan_requests(real, cfg, schema, backend, palette, log)
    log("synthesize.generate", n_requests=len(planned))
    responses = generate_batch(
        [p.request for p in planned], backend, cfg.backend.max_in_flight
    )
    failures = [
        (p, r) for p, r in zip(planned, responses) if not isinstance(r, GenResponse)
    ]
    if failures:
        p, err = failures[0]
        raise PipelineError(
            "genbackend",
            f"{len(failures)}/{len(planned)} generations failed; first: "
            f"{p.strategy.value} group {p.group} of {p.source.image_ref!r}: {err}",
        )

    images_root = out_dir / "images"
    synthetic: list[AnnotatedSample] = []
    decisions: list[Decision | None] = []
    backend_id = None
    for plan, resp in zip(planned, responses):
        backend_id = resp.backend_id
        ref = _synthetic_ref(plan)
        path = images_root / ref
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(resp.image)
        sample = AnnotatedSample(
            image_ref=ref,
            pose=plan.pose_used,
            category=plan.source.category,
            provenance=PROVENANCE_OF[plan.strategy],
            prompt_used=plan.prompt,
            seed=plan.seed,
        )
        synthetic.append(sample)
        if cfg.screening.redetector == "mock_markers":
            redetected = redetect_joints(resp.image, schema)
            decisions.append(screen_sample(sample, redetected, cfg.screening.filter))
        else:
            decisions.append(None)

    groups: dict[Provenance, list[list[AnnotatedSample]]] = {
        PROVENANCE_OF[s]: [[], []] for s in STRATEGY_ORDER
    }
    for plan, sample in zip(planned, synthetic):
        groups[PROVENANCE_OF[plan.strategy]][plan.group].append(sample)
    sizes = {s.image_ref: cfg.resolution for s in synthetic}
    full = assemble_in_domain(
        real,
        groups,
        subset_id="synth-full",
        split=Split.TRAIN,
        seed=cfg.seed,
        image_sizes=sizes,
    )
    write_coco(full, out_dir / "manifest_full.json")

    accepted = [s for s, d in zip(synthetic, decisions) if d is None or d.accept]
    rejected = [s for s, d in zip(synthetic, decisions) if d is not None and not d.accept]
    accepted_manifest = DatasetManifest.build(
        "synth-accepted",
        list(real) + accepted,
        Split.TRAIN,
        cfg.seed,
        image_sizes={s.image_ref: cfg.resolution for s in accepted},
    )
    rejected_manifest = DatasetManifest.build(
        "synth-rejected",
        rejected,
        Split.TRAIN,
        cfg.seed,
        image_sizes={s.image_ref: cfg.resolution for s in rejected},
    )
    write_coco(accepted_manifest, out_dir / "manifest_accepted.json")
    write_coco(rejected_manifest, out_dir / "manifest_rejected.json")

    with open(out_dir / "audit.jsonl", "w", encoding="utf-8") as fh:
        for plan, sample, decision in zip(planned, synthetic, decisions):
            record = {
                "image_ref": sample.image_ref,
                "source_image": plan.source.image_ref,
                "strategy": plan.strategy.value,
                "group": plan.group,
                "seed": plan.seed,
                "prompt": plan.prompt,
                "perturb": plan.perturb_audit,
                "oks": None if decision is None else decision.oks_value,
                "accepted": True if decision is None else decision.accept,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    oks_values = [d.oks_value for d in decisions if d is not None]
    report = SynthesisReport(
        n_real=len(real),
        n_synthetic=len(synthetic),
        n_accepted=len(accepted),
        n_rejected=len(rejected),
        mean_oks=float(np.mean(oks_values)) if oks_values else None,
        wall_time_s=time.perf_counter() - t0,
        out_dir=str(out_dir),
        backend_id=backend_id,
    )
    _write_summary(out_dir, report, full.provenance_counts)
    log(
        "synthesize.done",
        n_synthetic=report.n_synthetic,
        accepted=report.n_accepted,
        rejected=report.n_rejected,
    )
    return report


def _write_summary(out_dir: Path, report: SynthesisReport, counts: dict) -> None:
    doc = {
        "n_real": report.n_real,
        "n_synthetic": report.n_synthetic,
        "n_accepted": report.n_accepted,
        "n_rejected": report.n_rejected,
        "acceptance_rate": report.acceptance_rate,
        "mean_oks": report.mean_oks,
        "provenance_counts": {k.value: v for k, v in counts.items()},
        "backend_id": report.backend_id,
        "wall_time_s": report.wall_time_s,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Overlay rendering

_PROVENANCE_STRIP = {
    Provenance.REAL: (64, 64, 64),
    Provenance.MF: (140, 70, 20),
    Provenance.PA: (20, 90, 140),
    Provenance.CE: (90, 20, 140),
}


def render_overlay(sample: AnnotatedSample, image_png: bytes, palette: Palette) -> bytes:
    """Skeleton over the image plus a provenance strip in the top-left corner."""
    img = Image.open(io.BytesIO(image_png)).convert("RGB")
    draw = ImageDraw.Draw(img)
    xy = sample.pose.xy()
    vis = sample.pose.visibility()
    for li, (a, b) in enumerate(sample.pose.schema.limbs):
        if vis[a] > 0 and vis[b] > 0:
            draw.line(
                [tuple(np.round(xy[a]).astype(int)), tuple(np.round(xy[b]).astype(int))],
                fill=palette.limb_colors[li],
                width=LINE_WIDTH,
            )
    r = MARKER_RADIUS
    for k in range(sample.pose.schema.n_keypoints):
        if vis[k] > 0:
            cx, cy = int(round(xy[k, 0])), int(round(xy[k, 1]))
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=palette.keypoint_colors[k])
    strip_color = _PROVENANCE_STRIP[sample.provenance]
    label = sample.provenance.value
    draw.rectangle([0, 0, 9 + 6 * len(label), 13], fill=strip_color)
    draw.text((3, 1), label, fill=(255, 255, 255))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def viz_manifest(
    manifest: DatasetManifest,
    images_dir: str | Path,
    out_dir: str | Path,
    schema: KeypointSchema | None = None,
) -> list[Path]:
    """One overlay PNG per sample; raises MissingImageError on a broken ref."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    palette_cache: dict[str, Palette] = {}
    for i, sample in enumerate(manifest.samples):
        path = Path(images_dir) / sample.image_ref
        if not path.is_file():
            raise MissingImageError(sample.image_ref)
        fam = sample.pose.schema.family_id
        if fam not in palette_cache:
            palette_cache[fam] = build_palette(sample.pose.schema)
        png = render_overlay(sample, path.read_bytes(), palette_cache[fam])
        name = f"{i:05d}_{Path(sample.image_ref).stem}_overlay.png"
        target = out / name
        target.write_bytes(png)
        written.append(target)
    return written
