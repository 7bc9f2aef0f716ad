"""Command-line interface: one binary, nine subcommands.

    schema      print or export a keypoint schema
    perturb     apply geometric pose perturbations to a COCO file
    render      rasterize pose maps from a COCO file
    synthesize  full pipeline: prompts + generation + screening + assembly
    screen      OKS-screen a manifest against re-detected poses
    assemble    combine real + 6 synthetic groups at the fixed 1:6 ratio
    split       cross-domain train/test split
    eval        OKS mAP or PCK@0.05 over prediction/ground-truth files
    viz         skeleton overlays with provenance strips

Config comes from --config, else $APCAP_CONFIG, else defaults; any key can
be overridden per invocation with --set dotted.key=value. Logs go to stderr
as line-delimited JSON; artifacts and reports go to the paths you name.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .conditioning import MapStyle, build_palette, render_pose_map
from .config import ConfigError, PipelineConfig, load_config
from .dataset import (
    CrossDomainSpec,
    DatasetManifest,
    DatasetError,
    assemble_in_domain,
    read_coco,
    split_cross_domain,
    write_coco,
)
from .evaluation import EvalError, PredInstance, map_oks, pck05
from .perturb import Op, PerturbError, perturb
from .pipeline import (
    MissingImageError,
    PipelineError,
    derive_seed,
    synthesize,
    viz_manifest,
)
from .pose import AnnotatedSample, Pose, PoseError, Provenance, normalize_to_canvas
from .schema import SchemaError, load_schema, schema_to_text, write_schema_file
from .screening import screen_batch, summarize


def _log(event: str, **fields) -> None:
    record = {"ts": round(time.time(), 3), "event": event}
    record.update(fields)
    print(json.dumps(record, sort_keys=True, default=str), file=sys.stderr)


def _fail(stage: str, message: str) -> None:
    _log("error", stage=stage, message=message)
    raise SystemExit(1)


def _load_cfg(ctx) -> PipelineConfig:
    path, overrides = ctx.obj["config_path"], ctx.obj["overrides"]
    try:
        return load_config(path, overrides)
    except ConfigError as e:
        _fail("config", str(e))


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.BadParameter(f"--set expects dotted.key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value
    return out


@click.group()
@click.version_option(version=__version__, prog_name="apcap")
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    default=None,
    envvar="APCAP_CONFIG",
    help="Pipeline config file (YAML). Defaults to $APCAP_CONFIG.",
)
@click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a config key by dotted path, e.g. --set backend.retries=0.",
)
@click.pass_context
def main(ctx, config_path, overrides):
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = _parse_overrides(overrides)


@main.command("schema")
@click.argument("selector")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Write <family_id>.schema into this directory instead of printing.")
@click.pass_context
def cmd_schema(ctx, selector, out_dir):
    """Print (or export) the schema named by SELECTOR."""
    cfg_dir = None
    if ctx.obj["config_path"]:
        cfg_dir = str(Path(ctx.obj["config_path"]).parent)
    try:
        schema = load_schema(selector, cfg_dir)
    except (SchemaError, FileNotFoundError, KeyError) as e:
        _fail("schema", str(e))
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        path = write_schema_file(schema, out_dir)
        _log("schema.written", path=str(path))
    else:
        click.echo(schema_to_text(schema), nl=False)


def _bounds_for(manifest: DatasetManifest, ref: str) -> tuple[float, float]:
    w, h = manifest.image_sizes.get(ref, (0, 0))
    if w > 0 and h > 0:
        return (float(w), float(h))
    return (float("inf"), float("inf"))


@main.command("perturb")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--ops", default="face_move,limb_shift,joint_flex,back_rotate",
              show_default=True, help="Comma-separated op subset.")
@click.pass_context
def cmd_perturb(ctx, in_path, out_path, ops):
    """Perturb every pose in a COCO file; writes a new COCO file."""
    cfg = _load_cfg(ctx)
    try:
        op_set = {Op(name.strip()) for name in ops.split(",") if name.strip()}
    except ValueError as e:
        _fail("perturb", f"unknown op: {e}")
    try:
        manifest = read_coco(in_path)
    except (DatasetError, PoseError) as e:
        _fail("perturb", str(e))
    out_samples = []
    skip_count = 0
    for s in manifest.samples:
        seed = derive_seed(cfg.seed, s.image_ref, "pa", 0)
        rng = np.random.default_rng(seed)
        try:
            result = perturb(
                s.pose, cfg.perturb, op_set, rng, image_size=_bounds_for(manifest, s.image_ref)
            )
        except PerturbError as e:
            _fail("perturb", f"{s.image_ref}: {e}")
        skip_count += len(result.skipped)
        out_samples.append(
            AnnotatedSample(
                image_ref=s.image_ref,
                pose=result.pose,
                category=s.category,
                provenance=Provenance.PA,
                prompt_used=s.prompt_used,
                seed=seed,
            )
        )
    out_manifest = DatasetManifest.build(
        f"{manifest.subset_id}-perturbed", out_samples, manifest.split, cfg.seed,
        image_sizes=manifest.image_sizes,
    )
    write_coco(out_manifest, out_path)
    _log("perturb.done", samples=len(out_samples), skipped_ops=skip_count, out=out_path)


@main.command("render")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--style", type=click.Choice([s.value for s in MapStyle]), default=None,
              help="Defaults to the config's pose_map_style.")
@click.option("--normalize/--no-normalize", default=True, show_default=True,
              help="Crop-and-resize each pose to the canvas before rendering.")
@click.pass_context
def cmd_render(ctx, in_path, out_dir, style, normalize):
    """Rasterize one pose map per annotation in a COCO file."""
    cfg = _load_cfg(ctx)
    map_style = MapStyle(style) if style else cfg.pose_map_style
    try:
        manifest = read_coco(in_path)
    except (DatasetError, PoseError) as e:
        _fail("render", str(e))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    palette = None
    for i, s in enumerate(manifest.samples):
        if palette is None:
            palette = build_palette(s.pose.schema)
        pose = normalize_to_canvas(s.pose, cfg.resolution) if normalize else s.pose
        pose_map = render_pose_map(pose, cfg.resolution, map_style, palette)
        name = f"{i:05d}_{Path(s.image_ref).stem}_{map_style.value}.png"
        (out / name).write_bytes(pose_map.to_png_bytes())
    _log("render.done", maps=len(manifest.samples), out_dir=str(out))


@main.command("synthesize")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def cmd_synthesize(ctx, in_path):
    """Run the full generation pipeline over a real COCO corpus."""
    cfg = _load_cfg(ctx)
    try:
        schema = cfg.load_keypoint_schema()
        manifest = read_coco(in_path, schema)
    except (DatasetError, PoseError, FileNotFoundError) as e:
        _fail("input", str(e))
    if not manifest.samples:
        _log("synthesize.warning", message="input manifest is empty")
    try:
        report = synthesize(list(manifest.samples), cfg, schema, log=_log)
    except PipelineError as e:
        _fail(e.stage, str(e))
    click.echo(
        json.dumps(
            {
                "n_real": report.n_real,
                "n_synthetic": report.n_synthetic,
                "n_accepted": report.n_accepted,
                "n_rejected": report.n_rejected,
                "acceptance_rate": report.acceptance_rate,
                "out_dir": report.out_dir,
            },
            sort_keys=True,
        )
    )


@main.command("screen")
@click.option("--samples", "samples_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--redetected", "redetected_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def cmd_screen(ctx, samples_path, redetected_path, out_dir):
    """Accept/reject samples by OKS between manifest poses and re-detected poses."""
    cfg = _load_cfg(ctx)
    try:
        manifest = read_coco(samples_path)
        redetected = read_coco(redetected_path)
    except (DatasetError, PoseError) as e:
        _fail("screen", str(e))
    if len(redetected.samples) != len(manifest.samples):
        _fail(
            "screen",
            f"{len(manifest.samples)} samples but {len(redetected.samples)} re-detections",
        )
    decisions = screen_batch(
        list(manifest.samples),
        [s.pose for s in redetected.samples],
        cfg.screening.filter,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    accepted = [s for s, d in zip(manifest.samples, decisions) if d.accept]
    rejected = [s for s, d in zip(manifest.samples, decisions) if not d.accept]
    for name, subset in (("accepted", accepted), ("rejected", rejected)):
        sizes = {s.image_ref: manifest.image_sizes[s.image_ref] for s in subset
                 if s.image_ref in manifest.image_sizes}
        write_coco(
            DatasetManifest.build(
                f"{manifest.subset_id}-{name}", subset, manifest.split,
                manifest.seed, image_sizes=sizes,
            ),
            out / f"manifest_{name}.json",
        )
    click.echo(json.dumps(summarize(decisions), sort_keys=True))


def _read_group(path: str, expect: Provenance) -> list[AnnotatedSample]:
    manifest = read_coco(path)
    for s in manifest.samples:
        if s.provenance is not expect:
            raise DatasetError(
                f"{path}: sample {s.image_ref!r} has provenance "
                f"{s.provenance.value}, expected {expect.value}"
            )
    return list(manifest.samples)


@main.command("assemble")
@click.option("--real", "real_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mf", nargs=2, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--pa", nargs=2, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ce", nargs=2, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def cmd_assemble(ctx, real_path, mf, pa, ce, out_path):
    """Combine a real manifest with two groups per strategy (1:6 ratio)."""
    cfg = _load_cfg(ctx)
    try:
        real_manifest = read_coco(real_path)
        groups = {
            Provenance.MF: [_read_group(p, Provenance.MF) for p in mf],
            Provenance.PA: [_read_group(p, Provenance.PA) for p in pa],
            Provenance.CE: [_read_group(p, Provenance.CE) for p in ce],
        }
        combined = assemble_in_domain(
            list(real_manifest.samples),
            groups,
            subset_id="assembled",
            split=real_manifest.split,
            seed=cfg.seed,
            image_sizes=real_manifest.image_sizes,
        )
    except (DatasetError, PoseError) as e:
        _fail("assemble", str(e))
    write_coco(combined, out_path)
    _log(
        "assemble.done",
        total=len(combined),
        counts={k.value: v for k, v in combined.provenance_counts.items()},
        out=out_path,
    )


def _categories_arg(raw: str | None) -> frozenset | None:
    if raw is None:
        return None
    if raw.startswith("@"):
        lines = Path(raw[1:]).read_text(encoding="utf-8").splitlines()
        return frozenset(line.strip() for line in lines if line.strip())
    return frozenset(c.strip() for c in raw.split(",") if c.strip())


@main.command("split")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--source-categories", default=None,
              help="Comma-separated names or @file with one per line.")
@click.option("--target-categories", default=None,
              help="Comma-separated names or @file with one per line.")
@click.option("--out-train", required=True, type=click.Path(dir_okay=False))
@click.option("--out-test", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.pass_context
def cmd_split(ctx, in_path, source_categories, target_categories, out_train, out_test, seed):
    """Cross-domain split: train on source + synthetic target, test on real target."""
    cfg = _load_cfg(ctx)
    source = _categories_arg(source_categories)
    target = _categories_arg(target_categories)
    try:
        if source is None or target is None:
            if cfg.cross_domain is None:
                _fail("split", "no cross_domain config and no category flags given")
            spec = cfg.cross_domain
        else:
            spec = CrossDomainSpec(source_categories=source, target_categories=target)
        manifest = read_coco(in_path)
        train, test = split_cross_domain(
            list(manifest.samples), spec, seed=cfg.seed if seed is None else seed
        )
    except (DatasetError, PoseError) as e:
        _fail("split", str(e))
    write_coco(train, out_train)
    write_coco(test, out_test)
    _log(
        "split.done",
        train=len(train),
        test=len(test),
        train_categories=len(train.categories()),
        test_categories=len(test.categories()),
    )


def _load_predictions(path: str, gts: DatasetManifest):
    with open(path, "r", encoding="utf-8") as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise EvalError("predictions file must be a JSON array of result objects")
    if not gts.samples:
        raise EvalError("ground-truth manifest is empty")
    schema = gts.samples[0].pose.schema
    refs_by_id: dict[int, str] = {}
    cats_by_id: dict[int, str] = {}
    ref_order: dict[str, int] = {}
    for s in gts.samples:
        if s.image_ref not in ref_order:
            ref_order[s.image_ref] = len(ref_order) + 1
        refs_by_id[ref_order[s.image_ref]] = s.image_ref
    for i, name in enumerate(sorted({s.category for s in gts.samples}), start=1):
        cats_by_id[i] = name
    preds = []
    for i, row in enumerate(rows):
        flat = row.get("keypoints")
        if flat is None or len(flat) != 3 * schema.n_keypoints:
            raise EvalError(f"prediction {i}: bad keypoints array")
        points = tuple(
            (float(flat[3 * k]), float(flat[3 * k + 1]), int(flat[3 * k + 2]))
            for k in range(schema.n_keypoints)
        )
        pose = Pose(schema=schema, points=points, bbox=(0.0, 0.0, 1.0, 1.0))
        image_id = row.get("image_id")
        cat_id = row.get("category_id")
        if image_id not in refs_by_id:
            raise EvalError(f"prediction {i}: unknown image_id {image_id}")
        if cat_id not in cats_by_id:
            raise EvalError(f"prediction {i}: unknown category_id {cat_id}")
        preds.append(
            PredInstance(
                image_ref=refs_by_id[image_id],
                category=cats_by_id[cat_id],
                pose=pose,
                score=float(row.get("score", 1.0)),
            )
        )
    return preds


@main.command("eval")
@click.option("--metric", type=click.Choice(["map", "pck05"]), required=True)
@click.option("--preds", "preds_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gts", "gts_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def cmd_eval(ctx, metric, preds_path, gts_path, out_path):
    """Score predictions (COCO results JSON) against a ground-truth manifest."""
    try:
        gts = read_coco(gts_path)
        preds = _load_predictions(preds_path, gts)
        if metric == "map":
            report = map_oks(preds, gts)
        else:
            if len(preds) != len(gts.samples):
                raise EvalError(
                    f"pck05 needs one prediction per annotation in order: "
                    f"{len(preds)} vs {len(gts.samples)}"
                )
            report = pck05([p.pose for p in preds], gts)
    except (EvalError, DatasetError, PoseError) as e:
        _fail("eval", str(e))
    Path(out_path).write_text(report.to_json() + "\n", encoding="utf-8")
    click.echo(json.dumps({"metric": metric, "overall": report.overall}, sort_keys=True))


@main.command("viz")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--images-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def cmd_viz(ctx, manifest_path, images_dir, out_dir):
    """Write one skeleton-overlay PNG per sample."""
    try:
        manifest = read_coco(manifest_path)
        written = viz_manifest(manifest, images_dir, out_dir)
    except MissingImageError as e:
        _fail("viz", str(e))
    except (DatasetError, PoseError) as e:
        _fail("viz", str(e))
    _log("viz.done", overlays=len(written), out_dir=out_dir)


if __name__ == "__main__":
    main()
