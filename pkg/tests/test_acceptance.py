"""Acceptance suite: the six headline guarantees, one test per guarantee.

Each test prints one machine-greppable verdict line; the verbose test status
doubles as the pass/fail record. Tolerances and time budgets are asserted
inside the test bodies:

  1. perturbation displacement caps over 10,000 randomized poses, < 10 s
  2. filter loss equals the hand rule on 100 cases to 1e-12, exact endpoints
  3. diffusion schedule shape, forward Monte Carlo statistics, reverse
     round trip RMS <= 1e-3, all < 30 s
  4. detection mAP equals an exhaustive oracle on 200 micro cases to 1e-9,
     perfect scores are exactly 1.0, the 5% boundary classifies as stated
  5. end-to-end mock synthesis over 50 samples: 300 synthetic, >= 99%
     screening acceptance, byte-identical reruns, < 60 s per run
  6. cross-domain split with zero leakage at 158/31 categories, every
     balanced batch exactly 1:2 source:target, 1,000-sample round trip
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import micro_schema, real_sample, scatter_pose
from test_diffusion import consistent_denoiser
from test_eval import gt_at, oracle_map, pred_at, random_micro_case

from apcap.backend import MockBackend
from apcap.config import PipelineConfig
from apcap.dataset import (
    CrossDomainSpec,
    DatasetManifest,
    Split,
    balanced_batches,
    read_coco,
    split_cross_domain,
    write_coco,
)
from apcap.diffusion import Latent, forward_diffuse, linear_schedule, toy_denoise
from apcap.evaluation import OKS_THRESHOLDS, PredInstance, map_oks, pck05
from apcap.perturb import (
    PerturbConfig,
    back_rotate,
    face_move,
    joint_flex,
    limb_shift,
    nearest_labeled_distances,
)
from apcap.pipeline import synthesize
from apcap.pose import AnnotatedSample, Pose, Provenance
from apcap.screening import filter_loss


@contextmanager
def criterion(name):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"[acceptance] {name}: FAIL ({time.perf_counter() - t0:.1f}s)")
        raise
    print(f"[acceptance] {name}: PASS ({time.perf_counter() - t0:.1f}s)")


def quick_pose(schema, rng, label_prob=0.9):
    n = schema.n_keypoints
    pts = rng.uniform(20.0, 236.0, (n, 2))
    vis = (rng.uniform(size=n) < label_prob).astype(int) * 2
    if vis.sum() == 0:
        vis[int(rng.integers(n))] = 2
    labeled = pts[vis > 0]
    x0, y0 = labeled.min(axis=0) - 10.0
    x1, y1 = labeled.max(axis=0) + 10.0
    return Pose.from_arrays(schema, pts, vis, (x0, y0, x1 - x0, y1 - y0))


def test_perturbation_displacement_bounds(ap10k):
    with criterion("perturbation caps over 10,000 poses"):
        rng = np.random.default_rng(2024)
        ops = (face_move, limb_shift, joint_flex, back_rotate)
        n = ap10k.n_keypoints
        face = list(ap10k.face_group)
        spine = list(ap10k.spine_group)
        not_face = [k for k in range(n) if k not in face]
        not_spine = [k for k in range(n) if k not in spine]
        t0 = time.perf_counter()
        for _ in range(10_000):
            pose = quick_pose(ap10k, rng)
            cfg = PerturbConfig(
                face_move_max=(
                    None if rng.random() < 0.5 else float(rng.uniform(1.0, 20.0))
                ),
                joint_flex_max_deg=float(rng.uniform(2.0, 25.0)),
                back_rotate_max_deg=float(rng.uniform(2.0, 15.0)),
            )
            op = ops[int(rng.integers(4))]
            xy0, vis = pose.xy(), pose.visibility()
            out = op(pose, cfg, rng)
            xy1 = out.xy()
            d = np.linalg.norm(xy1 - xy0, axis=1)
            assert (d[vis == 0] == 0.0).all(), "unlabeled keypoint moved"
            if op is face_move:
                assert (d[not_face] == 0.0).all()
                assert d[face].max() <= cfg.resolved_face_move_max(pose) + 1e-9
                offsets = (xy1[face] - xy0[face])[vis[face] > 0]
                if len(offsets) > 1:  # one rigid translation for the group
                    assert np.ptp(offsets, axis=0).max() <= 1e-9
            elif op is back_rotate:
                assert (d[not_spine] == 0.0).all()
                pivot = spine[0]
                assert d[pivot] == 0.0
                if vis[pivot] > 0:
                    max_chord = 2.0 * math.sin(
                        math.radians(cfg.back_rotate_max_deg) / 2.0
                    )
                    for k in spine[1:]:
                        if vis[k] == 0:
                            continue
                        r0 = float(np.linalg.norm(xy0[k] - xy0[pivot]))
                        r1 = float(np.linalg.norm(xy1[k] - xy1[pivot]))
                        if r0 > 0.0:
                            assert abs(r1 - r0) <= 1e-6 * r0, "radius drifted"
                            assert d[k] <= r0 * max_chord + 1e-9
            else:  # limb_shift and joint_flex share the half-spacing cap
                dnn = nearest_labeled_distances(pose)
                cap = np.where(
                    np.isinf(dnn), 0.25 * pose.bbox_diagonal(), 0.5 * dnn
                )
                assert (d <= cap + 1e-9).all(), "displacement exceeded 0.5 d_nn"
                if op is joint_flex:
                    for a, b in ap10k.limbs:
                        if vis[a] > 0 and vis[b] > 0:
                            len0 = float(np.linalg.norm(xy0[a] - xy0[b]))
                            len1 = float(np.linalg.norm(xy1[a] - xy1[b]))
                            if len0 > 0.0:
                                assert abs(len1 - len0) <= 1e-6 * len0, (
                                    "bone length drifted"
                                )
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0, f"bound suite took {elapsed:.1f}s"


def test_filter_loss_matches_hand_rule():
    with criterion("filter loss vs hand rule, 100 cases"):
        schema = micro_schema(6)
        n = schema.n_keypoints
        rng = np.random.default_rng(7)

        def posed(y, labeled=None):
            pts = tuple(
                (float(k), y, 2 if labeled is None or labeled[k] else 0)
                for k in range(n)
            )
            return Pose(schema=schema, points=pts, bbox=(0.0, 0.0, float(n), 2.0))

        for _ in range(100):
            table = {k: float(rng.uniform(0.0, 2.0)) for k in range(n)}
            labeled = rng.uniform(size=n) < 0.8
            if not labeled.any():
                labeled[0] = True
            gt = posed(0.5, labeled)
            pred = posed(1.5)
            eps = float(rng.choice([0.0, float(rng.uniform(0.0, 2.0)), math.inf]))
            total, mask = filter_loss(
                pred, gt, lambda pxy, gxy: table[int(round(gxy[0]))], eps
            )
            want_mask = [bool(labeled[k]) and table[k] <= eps for k in range(n)]
            want_total = sum(table[k] for k in range(n) if want_mask[k])
            assert mask == want_mask
            assert total == pytest.approx(want_total, abs=1e-12)

        # the analytic endpoints hold exactly, not just to tolerance
        table = {k: float(rng.uniform(0.1, 2.0)) for k in range(n)}
        gt, pred = posed(0.5), posed(1.5)
        loss_fn = lambda pxy, gxy: table[int(round(gxy[0]))]
        total_inf, mask_inf = filter_loss(pred, gt, loss_fn, math.inf)
        assert total_inf == sum(table[k] for k in range(n))
        assert mask_inf == [True] * n
        total_zero, mask_zero = filter_loss(pred, gt, loss_fn, 0.0)
        assert total_zero == 0.0
        assert mask_zero == [False] * n


def test_diffusion_schedule_and_round_trip():
    with criterion("diffusion schedule, forward statistics, reverse round trip"):
        t0 = time.perf_counter()
        sched = linear_schedule(1000, 1e-4, 0.02)
        abar = np.array([sched.alpha_bar_at(t) for t in range(1, 1001)])
        assert (np.diff(abar) < 0.0).all(), "alpha_bar not strictly decreasing"
        assert abar[-1] < 1e-4

        # forward Monte Carlo: 1e5 unit latents pushed to three depths
        rng = np.random.default_rng(11)
        n_draws = 100_000
        z0 = Latent.of(np.ones(n_draws))
        for t in (50, 100, 200):
            noise = Latent.of(rng.standard_normal(n_draws))
            zt = forward_diffuse(z0, t, sched, noise).values
            want_mean = math.sqrt(sched.alpha_bar_at(t))
            want_var = 1.0 - sched.alpha_bar_at(t)
            assert abs(zt.mean() - want_mean) <= 0.01 * want_mean
            assert abs(zt.var() - want_var) <= 0.02 * want_var

        # fifty-step round trip against the consistent noise oracle
        sched50 = linear_schedule(50, 1e-4, 0.02)
        z0_small = Latent.of(rng.uniform(-1.0, 1.0, 64))
        noise = Latent.of(rng.standard_normal(64))
        zT = forward_diffuse(z0_small, 50, sched50, noise)
        restored = toy_denoise(
            zT, sched50, consistent_denoiser(z0_small.values, sched50),
            rng=np.random.default_rng(0),
        )
        rms = float(np.sqrt(np.mean((restored.values - z0_small.values) ** 2)))
        assert rms <= 1e-3, f"round-trip RMS {rms:.2e}"

        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0, f"diffusion suite took {elapsed:.1f}s"


def test_evaluation_matches_exhaustive_oracle(ap10k):
    with criterion("detection metrics vs exhaustive oracle, 200 cases"):
        rng = np.random.default_rng(1234)
        for case in range(200):
            preds, gts = random_micro_case(rng)
            report = map_oks(preds, gts)
            overall, per_threshold, _ = oracle_map(preds, gts)
            assert abs(report.overall - overall) <= 1e-9, f"case {case}"
            for thr in OKS_THRESHOLDS:
                assert abs(report.per_threshold[thr] - per_threshold[thr]) <= 1e-9

        # perfect predictions score exactly 1.0 on both metrics
        pose_rng = np.random.default_rng(4)
        gts = [
            real_sample(ap10k, pose_rng, f"p{i}.png", category=("a", "b")[i % 2],
                        min_sep=14.0)
            for i in range(4)
        ]
        preds = [
            PredInstance(s.image_ref, s.category, s.pose, 0.9 - 0.01 * i)
            for i, s in enumerate(gts)
        ]
        assert map_oks(preds, gts).overall == 1.0
        assert pck05([s.pose for s in gts], gts).overall == 1.0

        # 5% of max(100, 80) is 5 px: 4.9 in, 5.0 on the line in, 5.1 out
        gt = gt_at((50.0, 40.0), bbox=(0.0, 0.0, 100.0, 80.0))
        for dx, want in ((4.9, 1.0), (5.0, 1.0), (5.1, 0.0)):
            pred = pred_at((50.0 + dx, 40.0), 0.9).pose
            assert pck05([pred], [gt]).overall == want, f"dx={dx}"


def test_end_to_end_mock_synthesis(ap10k, tmp_path):
    with criterion("end-to-end mock synthesis, 50 samples, two runs"):
        rng = np.random.default_rng(99)
        cats = ("zebra", "horse", "antelope")
        real = [
            real_sample(ap10k, rng, f"seed{i:03d}.png", category=cats[i % 3],
                        min_sep=14.0)
            for i in range(50)
        ]
        reports, runtimes = [], []
        for name in ("one", "two"):
            cfg = PipelineConfig(out_dir=str(tmp_path / name), seed=13)
            t0 = time.perf_counter()
            reports.append(synthesize(real, cfg, ap10k, backend=MockBackend(ap10k)))
            runtimes.append(time.perf_counter() - t0)
        for report, runtime in zip(reports, runtimes):
            assert runtime < 60.0, f"run took {runtime:.1f}s"
            assert report.n_real == 50
            assert report.n_synthetic == 300
            assert report.acceptance_rate >= 0.99, (
                f"acceptance {report.acceptance_rate:.4f}"
            )
        full = read_coco(tmp_path / "one" / "manifest_full.json")
        counts = {k.value: v for k, v in full.provenance_counts.items()}
        assert counts == {"real": 50, "mf": 100, "pa": 100, "ce": 100}

        a, b = tmp_path / "one", tmp_path / "two"
        for rel in (
            "manifest_full.json",
            "manifest_accepted.json",
            "manifest_rejected.json",
            "audit.jsonl",
        ):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        images = sorted(p.relative_to(a) for p in (a / "images").rglob("*.png"))
        assert len(images) == 300
        for rel in images:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), str(rel)


def test_dataset_split_batching_round_trip(birds, tmp_path):
    with criterion("cross-domain split, balanced batches, 1,000-sample round trip"):
        rng = np.random.default_rng(5)
        source_cats = frozenset(f"species{i:03d}" for i in range(158))
        target_cats = frozenset(f"species{i:03d}" for i in range(158, 189))
        samples = []
        for c in sorted(source_cats):
            samples.append(real_sample(birds, rng, f"{c}_r0.png", category=c))
        for c in sorted(target_cats):
            samples.append(real_sample(birds, rng, f"{c}_r0.png", category=c))
            for j in range(2):
                base = scatter_pose(birds, rng)
                samples.append(
                    AnnotatedSample(
                        image_ref=f"{c}_s{j}.png", pose=base, category=c,
                        provenance=Provenance.MF, prompt_used="a prompt", seed=j,
                    )
                )
        spec = CrossDomainSpec(source_cats, target_cats)
        train, test = split_cross_domain(samples, spec, seed=3)

        assert len(train.samples) == 158 + 62
        assert len(test.samples) == 31
        for s in train.samples:  # no real target sample on the train side
            if s.category in target_cats:
                assert s.provenance is not Provenance.REAL
        for s in test.samples:  # test side is purely real target
            assert s.category in target_cats
            assert s.provenance is Provenance.REAL
        train_refs = {s.image_ref for s in train.samples}
        test_refs = {s.image_ref for s in test.samples}
        assert train_refs.isdisjoint(test_refs)

        n_batches = 0
        for batch in balanced_batches(train, spec, 6, seed=1, epochs=2):
            assert len(batch) == 6
            n_source = sum(1 for s in batch if s.category in source_cats)
            n_target = sum(1 for s in batch if s.category in target_cats)
            assert (n_source, n_target) == (2, 4), "batch not 1:2 source:target"
            n_batches += 1
        assert n_batches == 2 * min(158 // 2, 62 // 4)

        provs = (Provenance.REAL, Provenance.MF, Provenance.PA, Provenance.CE)
        pool = []
        for i in range(1000):
            cat = f"species{int(rng.integers(189)):03d}"
            prov = provs[int(rng.integers(4))]
            pose = scatter_pose(birds, rng, label_prob=0.85)
            if prov is Provenance.REAL:
                pool.append(AnnotatedSample(f"rt{i:04d}.png", pose, cat, prov))
            else:
                pool.append(
                    AnnotatedSample(
                        f"rt{i:04d}.png", pose, cat, prov,
                        prompt_used=f"prompt {i}", seed=i,
                    )
                )
        manifest = DatasetManifest.build(
            "round-trip", pool, Split.TRAIN, 9,
            image_sizes={s.image_ref: (256, 256) for s in pool},
        )
        path = tmp_path / "round_trip.json"
        write_coco(manifest, path)
        back = read_coco(path)
        assert back.subset_id == manifest.subset_id
        assert back.split is manifest.split
        assert len(back.samples) == 1000
        for before, after in zip(manifest.samples, back.samples):
            assert after.image_ref == before.image_ref
            assert after.category == before.category
            assert after.provenance is before.provenance
            assert after.prompt_used == before.prompt_used
            assert after.seed == before.seed
            assert after.pose.points == before.pose.points
            assert after.pose.bbox == before.pose.bbox
        assert back.image_sizes == manifest.image_sizes
