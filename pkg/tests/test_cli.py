"""Command-line surface: each subcommand's happy path plus failure tagging.

Every failure exits 1 after logging a JSON error event to stderr with a
stage name, so shell pipelines can tell what broke without parsing prose.
"""

import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from click.testing import CliRunner
from PIL import Image

from conftest import real_sample

from apcap.cli import main
from apcap.conditioning import MapStyle
from apcap.dataset import DatasetManifest, Split, read_coco, write_coco
from apcap.pose import AnnotatedSample, Provenance
from apcap.schema import builtin_schema, load_schema, schema_to_text

COMMANDS = (
    "schema", "perturb", "render", "synthesize", "screen",
    "assemble", "split", "eval", "viz",
)


@pytest.fixture
def runner():
    return CliRunner()


def stderr_events(result):
    return [json.loads(line) for line in result.stderr.splitlines() if line.strip()]


def last_error(result):
    errors = [e for e in stderr_events(result) if e["event"] == "error"]
    assert errors, f"no error event in stderr: {result.stderr!r}"
    return errors[-1]


def write_real_manifest(schema, path, n=2, seed=3):
    rng = np.random.default_rng(seed)
    cats = ("zebra", "horse")
    samples = [
        real_sample(schema, rng, f"img{i}.png", category=cats[i % 2], min_sep=14.0)
        for i in range(n)
    ]
    manifest = DatasetManifest.build(
        "real", samples, Split.TRAIN, 0,
        image_sizes={s.image_ref: (256, 256) for s in samples},
    )
    write_coco(manifest, path)
    return manifest


def as_synthetic(sample, provenance, tag):
    return AnnotatedSample(
        image_ref=f"{tag}/{sample.image_ref}",
        pose=sample.pose,
        category=sample.category,
        provenance=provenance,
        prompt_used="a prompt",
        seed=7,
    )


class TestTopLevel:
    def test_version(self, runner):
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == 0
        assert "apcap" in result.output

    def test_help_lists_every_command(self, runner):
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for name in COMMANDS:
            assert name in result.output

    def test_set_requires_key_value(self, runner):
        result = runner.invoke(main, ["--set", "noequals", "schema", "ap10k17"])
        assert result.exit_code == 2
        assert "dotted.key=value" in result.output + str(result.exception)


class TestSchemaCmd:
    def test_prints_builtin(self, runner):
        result = runner.invoke(main, ["schema", "ap10k17"])
        assert result.exit_code == 0
        assert result.stdout == schema_to_text(builtin_schema("ap10k17"))

    def test_exports_to_directory(self, runner, tmp_path):
        result = runner.invoke(main, ["schema", "birds23", "--out", str(tmp_path)])
        assert result.exit_code == 0
        assert (tmp_path / "birds23.schema").is_file()
        assert load_schema("birds23", tmp_path) == builtin_schema("birds23")
        assert any(e["event"] == "schema.written" for e in stderr_events(result))

    def test_unknown_selector_fails(self, runner):
        result = runner.invoke(main, ["schema", "nosuch17"])
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "schema"


class TestPerturbCmd:
    def test_writes_perturbed_copy(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        manifest = write_real_manifest(ap10k, src)
        out = tmp_path / "perturbed.json"
        result = runner.invoke(main, ["perturb", "--in", str(src), "--out", str(out)])
        assert result.exit_code == 0
        moved = read_coco(out)
        assert moved.subset_id == "real-perturbed"
        assert [s.image_ref for s in moved.samples] == [
            s.image_ref for s in manifest.samples
        ]
        for before, after in zip(manifest.samples, moved.samples):
            assert after.provenance is Provenance.PA
            assert after.pose.points != before.pose.points
        done = [e for e in stderr_events(result) if e["event"] == "perturb.done"]
        assert done and done[0]["samples"] == 2

    def test_op_subset(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src)
        out = tmp_path / "faces.json"
        result = runner.invoke(
            main, ["perturb", "--in", str(src), "--out", str(out), "--ops", "face_move"]
        )
        assert result.exit_code == 0
        assert len(read_coco(out).samples) == 2

    def test_unknown_op_fails(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src)
        result = runner.invoke(
            main, ["perturb", "--in", str(src), "--out", str(tmp_path / "x.json"),
                   "--ops", "warp"]
        )
        assert result.exit_code == 1
        err = last_error(result)
        assert err["stage"] == "perturb" and "unknown op" in err["message"]

    def test_unreadable_input_fails(self, runner, tmp_path):
        src = tmp_path / "broken.json"
        src.write_text("not json at all")
        result = runner.invoke(
            main, ["perturb", "--in", str(src), "--out", str(tmp_path / "x.json")]
        )
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "perturb"


class TestRenderCmd:
    def test_writes_one_map_per_annotation(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src)
        out = tmp_path / "maps"
        result = runner.invoke(main, ["render", "--in", str(src), "--out-dir", str(out)])
        assert result.exit_code == 0
        style = MapStyle.SKELETON_LINES.value
        names = sorted(p.name for p in out.glob("*.png"))
        assert names == [f"00000_img0_{style}.png", f"00001_img1_{style}.png"]
        with Image.open(out / names[0]) as im:
            assert im.size == (256, 256)

    def test_style_flag(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src)
        out = tmp_path / "maps"
        result = runner.invoke(
            main,
            ["render", "--in", str(src), "--out-dir", str(out),
             "--style", MapStyle.HEATMAP.value],
        )
        assert result.exit_code == 0
        assert len(list(out.glob(f"*_{MapStyle.HEATMAP.value}.png"))) == 2


class TestSynthesizeCmd:
    def test_runs_pipeline_from_config_file(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src, n=1)
        out_dir = tmp_path / "out"
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(yaml.safe_dump({"out_dir": str(out_dir), "seed": 7}))
        result = runner.invoke(
            main, ["--config", str(cfg), "synthesize", "--in", str(src)]
        )
        assert result.exit_code == 0, result.stderr
        summary = json.loads(result.stdout.splitlines()[-1])
        assert summary["n_real"] == 1 and summary["n_synthetic"] == 6
        assert summary["out_dir"] == str(out_dir)
        for name in ("manifest_full.json", "manifest_accepted.json", "summary.json"):
            assert (out_dir / name).is_file()

    def test_env_config_and_set_override(self, runner, tmp_path, ap10k):
        # config comes from $APCAP_CONFIG; --set rewrites single keys on top
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src, n=1)
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(
            yaml.safe_dump({"out_dir": str(tmp_path / "ignored"),
                            "resolution": [128, 128]})
        )
        out_dir = tmp_path / "chosen"
        result = runner.invoke(
            main,
            ["--set", f"out_dir={out_dir}", "synthesize", "--in", str(src)],
            env={"APCAP_CONFIG": str(cfg)},
        )
        assert result.exit_code == 0, result.stderr
        assert not (tmp_path / "ignored").exists()
        full = read_coco(out_dir / "manifest_full.json")
        synth_refs = [s.image_ref for s in full.samples
                      if s.provenance is not Provenance.REAL]
        assert len(synth_refs) == 6
        with Image.open(out_dir / "images" / synth_refs[0]) as im:
            assert im.size == (128, 128)  # proves the env config was read

    def test_empty_input_manifest_is_a_warning(self, runner, tmp_path, ap10k):
        src = tmp_path / "empty.json"
        write_coco(DatasetManifest.build("real", [], Split.TRAIN, 0), src)
        result = runner.invoke(
            main, ["--set", f"out_dir={tmp_path / 'o'}", "synthesize", "--in", str(src)]
        )
        assert result.exit_code == 0
        assert json.loads(result.stdout.splitlines()[-1])["n_synthetic"] == 0
        assert any(e["event"] == "synthesize.warning" for e in stderr_events(result))

    def test_config_error_is_stage_tagged(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src, n=1)
        result = runner.invoke(
            main, ["--set", "speling=1", "synthesize", "--in", str(src)]
        )
        assert result.exit_code == 1
        err = last_error(result)
        assert err["stage"] == "config" and "unknown config key" in err["message"]

    def test_bad_input_is_stage_tagged(self, runner, tmp_path):
        src = tmp_path / "broken.json"
        src.write_text("[not coco")
        result = runner.invoke(
            main, ["--set", f"out_dir={tmp_path / 'o'}", "synthesize", "--in", str(src)]
        )
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "input"

    def test_unreachable_backend_is_stage_tagged(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src, n=1)
        result = runner.invoke(
            main,
            ["--set", f"out_dir={tmp_path / 'o'}",
             "--set", "backend.kind=remote",
             "--set", "backend.endpoint=http://127.0.0.1:9",
             "--set", "backend.retries=0",
             "synthesize", "--in", str(src)],
        )
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "genbackend"


class TestScreenCmd:
    def test_splits_accepted_and_rejected(self, runner, tmp_path, ap10k):
        src = tmp_path / "samples.json"
        manifest = write_real_manifest(ap10k, src)
        # first re-detection matches, second is far off
        redetected = []
        for i, s in enumerate(manifest.samples):
            pose = s.pose
            if i == 1:
                pose = pose.with_points(pose.xy() + 90.0)
            redetected.append(
                AnnotatedSample(
                    image_ref=s.image_ref, pose=pose, category=s.category,
                    provenance=Provenance.REAL,
                )
            )
        redet_path = tmp_path / "redetected.json"
        write_coco(
            DatasetManifest.build(
                "redet", redetected, Split.TRAIN, 0,
                image_sizes=manifest.image_sizes,
            ),
            redet_path,
        )
        out = tmp_path / "screened"
        result = runner.invoke(
            main,
            ["screen", "--samples", str(src), "--redetected", str(redet_path),
             "--out-dir", str(out)],
        )
        assert result.exit_code == 0
        summary = json.loads(result.stdout.splitlines()[-1])
        assert summary["total"] == 2
        assert summary["accepted"] == 1 and summary["rejected"] == 1
        accepted = read_coco(out / "manifest_accepted.json")
        rejected = read_coco(out / "manifest_rejected.json")
        assert accepted.subset_id == "real-accepted"
        assert [s.image_ref for s in accepted.samples] == ["img0.png"]
        assert [s.image_ref for s in rejected.samples] == ["img1.png"]

    def test_length_mismatch_fails(self, runner, tmp_path, ap10k):
        src = tmp_path / "samples.json"
        write_real_manifest(ap10k, src, n=2)
        short = tmp_path / "short.json"
        write_real_manifest(ap10k, short, n=1)
        result = runner.invoke(
            main,
            ["screen", "--samples", str(src), "--redetected", str(short),
             "--out-dir", str(tmp_path / "o")],
        )
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "screen"


class TestAssembleCmd:
    def _write_groups(self, manifest, tmp_path):
        paths = {}
        for prov in (Provenance.MF, Provenance.PA, Provenance.CE):
            for g in range(2):
                samples = [
                    as_synthetic(s, prov, f"{prov.value}{g}")
                    for s in manifest.samples
                ]
                path = tmp_path / f"{prov.value}{g}.json"
                write_coco(
                    DatasetManifest.build(
                        f"{prov.value}{g}", samples, Split.TRAIN, 0
                    ),
                    path,
                )
                paths.setdefault(prov, []).append(str(path))
        return paths

    def test_combines_at_one_to_six(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        manifest = write_real_manifest(ap10k, src)
        groups = self._write_groups(manifest, tmp_path)
        out = tmp_path / "combined.json"
        result = runner.invoke(
            main,
            ["assemble", "--real", str(src),
             "--mf", *groups[Provenance.MF],
             "--pa", *groups[Provenance.PA],
             "--ce", *groups[Provenance.CE],
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.stderr
        combined = read_coco(out)
        counts = {k.value: v for k, v in combined.provenance_counts.items()}
        assert counts == {"real": 2, "mf": 4, "pa": 4, "ce": 4}
        done = [e for e in stderr_events(result) if e["event"] == "assemble.done"]
        assert done and done[0]["total"] == 14

    def test_wrong_provenance_in_group_fails(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        manifest = write_real_manifest(ap10k, src)
        groups = self._write_groups(manifest, tmp_path)
        result = runner.invoke(
            main,
            ["assemble", "--real", str(src),
             "--mf", str(src), groups[Provenance.MF][1],
             "--pa", *groups[Provenance.PA],
             "--ce", *groups[Provenance.CE],
             "--out", str(tmp_path / "x.json")],
        )
        assert result.exit_code == 1
        err = last_error(result)
        assert err["stage"] == "assemble" and "expected mf" in err["message"]

    def test_short_group_fails(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        manifest = write_real_manifest(ap10k, src)
        groups = self._write_groups(manifest, tmp_path)
        short = tmp_path / "short_mf.json"
        write_coco(
            DatasetManifest.build(
                "short", [as_synthetic(manifest.samples[0], Provenance.MF, "solo")],
                Split.TRAIN, 0,
            ),
            short,
        )
        result = runner.invoke(
            main,
            ["assemble", "--real", str(src),
             "--mf", str(short), groups[Provenance.MF][1],
             "--pa", *groups[Provenance.PA],
             "--ce", *groups[Provenance.CE],
             "--out", str(tmp_path / "x.json")],
        )
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "assemble"


class TestSplitCmd:
    def _mixed_manifest(self, ap10k, path, n_zebra=4, n_horse=3):
        rng = np.random.default_rng(5)
        samples = [
            real_sample(ap10k, rng, f"z{i}.png", category="zebra", min_sep=14.0)
            for i in range(n_zebra)
        ] + [
            real_sample(ap10k, rng, f"h{i}.png", category="horse", min_sep=14.0)
            for i in range(n_horse)
        ]
        write_coco(DatasetManifest.build("mixed", samples, Split.TRAIN, 0), path)

    def test_splits_by_category_flags(self, runner, tmp_path, ap10k):
        src = tmp_path / "mixed.json"
        self._mixed_manifest(ap10k, src)
        target_file = tmp_path / "targets.txt"
        target_file.write_text("horse\n")
        out_train, out_test = tmp_path / "train.json", tmp_path / "test.json"
        result = runner.invoke(
            main,
            ["split", "--in", str(src),
             "--source-categories", "zebra",
             "--target-categories", f"@{target_file}",
             "--out-train", str(out_train), "--out-test", str(out_test)],
        )
        assert result.exit_code == 0, result.stderr
        train, test = read_coco(out_train), read_coco(out_test)
        assert {s.category for s in train.samples} == {"zebra"}
        assert {s.category for s in test.samples} == {"horse"}
        assert len(train.samples) == 4 and len(test.samples) == 3

    def test_config_cross_domain_used_without_flags(self, runner, tmp_path, ap10k):
        src = tmp_path / "mixed.json"
        self._mixed_manifest(ap10k, src)
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(
            yaml.safe_dump(
                {"cross_domain": {"source_categories": ["zebra"],
                                  "target_categories": ["horse"]}}
            )
        )
        result = runner.invoke(
            main,
            ["--config", str(cfg), "split", "--in", str(src),
             "--out-train", str(tmp_path / "tr.json"),
             "--out-test", str(tmp_path / "te.json")],
        )
        assert result.exit_code == 0, result.stderr
        assert len(read_coco(tmp_path / "te.json").samples) == 3

    def test_no_spec_anywhere_fails(self, runner, tmp_path, ap10k):
        src = tmp_path / "mixed.json"
        self._mixed_manifest(ap10k, src)
        result = runner.invoke(
            main,
            ["split", "--in", str(src),
             "--out-train", str(tmp_path / "tr.json"),
             "--out-test", str(tmp_path / "te.json")],
        )
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "split"

    def test_overlapping_domains_fail(self, runner, tmp_path, ap10k):
        src = tmp_path / "mixed.json"
        self._mixed_manifest(ap10k, src)
        result = runner.invoke(
            main,
            ["split", "--in", str(src),
             "--source-categories", "zebra", "--target-categories", "zebra",
             "--out-train", str(tmp_path / "tr.json"),
             "--out-test", str(tmp_path / "te.json")],
        )
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "split"


class TestEvalCmd:
    def _pred_rows(self, manifest, score=0.9):
        # ids mirror the document layout: images by first appearance,
        # categories by sorted name
        ref_ids: dict[str, int] = {}
        for s in manifest.samples:
            ref_ids.setdefault(s.image_ref, len(ref_ids) + 1)
        cat_ids = {
            name: i
            for i, name in enumerate(
                sorted({s.category for s in manifest.samples}), start=1
            )
        }
        rows = []
        for s in manifest.samples:
            flat = []
            for x, y, v in s.pose.points:
                flat += [x, y, v]
            rows.append(
                {
                    "image_id": ref_ids[s.image_ref],
                    "category_id": cat_ids[s.category],
                    "score": score,
                    "keypoints": flat,
                }
            )
        return rows

    def _setup(self, ap10k, tmp_path):
        gts = tmp_path / "gts.json"
        manifest = write_real_manifest(ap10k, gts)
        preds = tmp_path / "preds.json"
        preds.write_text(json.dumps(self._pred_rows(manifest)))
        return gts, preds

    def test_perfect_map(self, runner, tmp_path, ap10k):
        gts, preds, out = *self._setup(ap10k, tmp_path), tmp_path / "report.json"
        result = runner.invoke(
            main,
            ["eval", "--metric", "map", "--preds", str(preds), "--gts", str(gts),
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.stderr
        assert json.loads(result.stdout.splitlines()[-1]) == {
            "metric": "map", "overall": 1.0,
        }
        report = json.loads(out.read_text())
        assert report["per_threshold"]["0.50"] == 1.0

    def test_perfect_pck(self, runner, tmp_path, ap10k):
        gts, preds, out = *self._setup(ap10k, tmp_path), tmp_path / "report.json"
        result = runner.invoke(
            main,
            ["eval", "--metric", "pck05", "--preds", str(preds), "--gts", str(gts),
             "--out", str(out)],
        )
        assert result.exit_code == 0, result.stderr
        assert json.loads(result.stdout.splitlines()[-1])["overall"] == 1.0
        assert out.is_file()

    def test_pck_length_mismatch_fails(self, runner, tmp_path, ap10k):
        gts = tmp_path / "gts.json"
        manifest = write_real_manifest(ap10k, gts)
        preds = tmp_path / "preds.json"
        preds.write_text(json.dumps(self._pred_rows(manifest)[:1]))
        result = runner.invoke(
            main,
            ["eval", "--metric", "pck05", "--preds", str(preds), "--gts", str(gts),
             "--out", str(tmp_path / "r.json")],
        )
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "eval"

    def test_bad_keypoints_array_fails(self, runner, tmp_path, ap10k):
        gts = tmp_path / "gts.json"
        manifest = write_real_manifest(ap10k, gts)
        rows = self._pred_rows(manifest)
        rows[0]["keypoints"] = rows[0]["keypoints"][:5]
        preds = tmp_path / "preds.json"
        preds.write_text(json.dumps(rows))
        result = runner.invoke(
            main,
            ["eval", "--metric", "map", "--preds", str(preds), "--gts", str(gts),
             "--out", str(tmp_path / "r.json")],
        )
        assert result.exit_code == 1
        err = last_error(result)
        assert err["stage"] == "eval" and "bad keypoints" in err["message"]

    def test_unknown_image_id_fails(self, runner, tmp_path, ap10k):
        gts = tmp_path / "gts.json"
        manifest = write_real_manifest(ap10k, gts)
        rows = self._pred_rows(manifest)
        rows[0]["image_id"] = 99
        preds = tmp_path / "preds.json"
        preds.write_text(json.dumps(rows))
        result = runner.invoke(
            main,
            ["eval", "--metric", "map", "--preds", str(preds), "--gts", str(gts),
             "--out", str(tmp_path / "r.json")],
        )
        assert result.exit_code == 1
        assert "unknown image_id" in last_error(result)["message"]

    def test_non_array_predictions_fail(self, runner, tmp_path, ap10k):
        gts = tmp_path / "gts.json"
        write_real_manifest(ap10k, gts)
        preds = tmp_path / "preds.json"
        preds.write_text("{}")
        result = runner.invoke(
            main,
            ["eval", "--metric", "map", "--preds", str(preds), "--gts", str(gts),
             "--out", str(tmp_path / "r.json")],
        )
        assert result.exit_code == 1
        assert last_error(result)["stage"] == "eval"


class TestVizCmd:
    def test_writes_overlays(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src, n=1)
        images = tmp_path / "images"
        images.mkdir()
        Image.new("RGB", (256, 256), (90, 90, 90)).save(images / "img0.png")
        out = tmp_path / "viz"
        result = runner.invoke(
            main,
            ["viz", "--manifest", str(src), "--images-dir", str(images),
             "--out-dir", str(out)],
        )
        assert result.exit_code == 0, result.stderr
        assert (out / "00000_img0_overlay.png").is_file()
        done = [e for e in stderr_events(result) if e["event"] == "viz.done"]
        assert done and done[0]["overlays"] == 1

    def test_missing_image_fails(self, runner, tmp_path, ap10k):
        src = tmp_path / "real.json"
        write_real_manifest(ap10k, src, n=1)
        (tmp_path / "images").mkdir()
        result = runner.invoke(
            main,
            ["viz", "--manifest", str(src), "--images-dir", str(tmp_path / "images"),
             "--out-dir", str(tmp_path / "viz")],
        )
        assert result.exit_code == 1
        err = last_error(result)
        assert err["stage"] == "viz" and "image not found" in err["message"]
