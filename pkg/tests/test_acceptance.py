"""Acceptance criteria, one test per criterion.

Each test prints a single ``AC<n> ... PASS|FAIL`` line; the lines are also
collected and repeated in the pytest terminal summary.  Run this file
directly (``python tests/test_acceptance.py``) for the lines alone.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import mask_covers, random_manifest, raster_mask  # noqa: E402
from test_evaluation import random_instance, reference_ap  # noqa: E402
from slidesampler.evaluation import (Detection, GroundTruth, ground_truth_from_slides, map_score,  # noqa: E402
                                     match_and_ap, restrict_to_screened)
from slidesampler.harness import OracleDetector, OracleDetectorConfig, infer_slide  # noqa: E402
from slidesampler.nms import nms, nms_indices  # noqa: E402
from slidesampler.sampler import SamplerConfig, make_sampler  # noqa: E402
from slidesampler.synth import REFERENCE_TOTALS, synthetic_dataset, reference_manifest  # noqa: E402
from slidesampler.sync import ExactClient, MockExactServer, RetryPolicy, ServerConfig  # noqa: E402
from slidesampler.training import simulate  # noqa: E402

RESULTS = []


def report(tag, name, ok, detail):
    line = f"{tag} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_ac1_sampling_distribution():
    started = time.perf_counter()
    manifest = reference_manifest(roles=("train",) * 6)
    sampler = make_sampler(manifest, SamplerConfig(batch_size=16))
    counts = np.zeros(5)
    drawn, index = 0, 0
    while drawn < 100_000:
        extra = sampler.batch(0, index, with_ground_truth=False).seed_classes[5:]
        index += 1
        np.add.at(counts, list(extra), 1)
        drawn += len(extra)
    elapsed = time.perf_counter() - started
    p = np.array(REFERENCE_TOTALS) / sum(REFERENCE_TOTALS)
    expected = (1 - p) / 4
    err = np.abs(counts / drawn - expected).max()
    documented = np.abs(expected - [0.2497, 0.2456, 0.2140, 0.1739, 0.1168]).max()
    ok = err <= 0.01 and documented <= 5e-5 and elapsed < 5.0
    report("AC1", "sampling distribution", ok, f"{drawn} extra draws, max |err| {err:.4f}, {elapsed:.2f} s")


def test_ac2_containment():
    started = time.perf_counter()
    total, bad = 0, 0
    for seed in range(100):
        m = random_manifest(seed, n_slides=2, patch_size=128, size=1024, n_cells=120)
        masks = {s.slide_id: raster_mask(s.screen_map.rects, s.width, s.height) for s in m.slides}
        sampler = make_sampler(m, SamplerConfig(patch_size=128, batch_size=10, seed=seed))
        for index in range(10):
            for spec in sampler.batch(0, index, with_ground_truth=False).patches:
                total += 1
                bad += not mask_covers(masks[spec.slide_id], spec.rect)
    elapsed = time.perf_counter() - started
    ok = total >= 10_000 and bad == 0 and elapsed < 10.0
    report("AC2", "containment", ok, f"{total} patches, {bad} violations, {elapsed:.2f} s")


def test_ac3_batch_composition():
    checked, missing = 0, 0
    for seed in range(20):
        m = random_manifest(1000 + seed, n_slides=2, patch_size=128, size=1024, n_cells=80)
        cls_of = {a.id: a.cls for s in m.slides for a in s.annotations}
        for bs in (5, 6, 9, 16):
            sampler = make_sampler(m, SamplerConfig(patch_size=128, batch_size=bs, seed=seed))
            for index in range(125):
                batch = sampler.batch(0, index, with_ground_truth=False)
                seeds = {cls_of[p.seed_annotation_id] for p in batch.patches}
                checked += 1
                missing += seeds != {0, 1, 2, 3, 4}
    report("AC3", "batch composition", checked >= 10_000 and missing == 0,
           f"{checked} batches, {missing} missing a class")


def test_ac4_map_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        dets, gts = random_instance(rng)
        got = match_and_ap(dets, gts)
        for cls, ap in reference_ap(dets, gts).items():
            worst = max(worst, abs(got.per_class[cls].ap - ap))
    gts = [GroundTruth(1, "a", 0, 0, 0, 10, 10), GroundTruth(2, "a", 0, 50, 50, 10, 10)]
    hand = match_and_ap([Detection(1, "a", 0, 0.9, 0, 0, 10, 10)], gts).per_class[0].ap
    report("AC4", "mAP oracle equivalence", worst <= 1e-9 and hand == 6 / 11,
           f"max |diff| {worst:.1e} over 1000 instances, hand case {hand!r}")


def test_ac5_table_row_mean():
    value = map_score([0.93, 0.85, 0.88, 0.89, 0.81])
    report("AC5", "table row mean", round(value, 2) == 0.87, f"mean {value:.4f}")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return synthetic_dataset(tmp_path_factory.mktemp("acceptance"), total=5000, seed=0, patch_size=256)


def _run_pipeline(manifest, cfg):
    detector = OracleDetector(manifest, cfg)
    dets = []
    for slide in manifest.slides:
        dets += infer_slide(detector, slide, 1024, 256, manifest=manifest)
    dets = restrict_to_screened(dets, manifest.slides)
    return match_and_ap(dets, ground_truth_from_slides(manifest.slides))


def test_ac6_end_to_end(dataset):
    started = time.perf_counter()
    full = [s for s in dataset.slides if s.screen_map.area == s.width * s.height]
    layout_ok = dataset.n_annotations == 5000 and len(full) == 2 and len(dataset.slides) == 6
    perfect = _run_pipeline(dataset, OracleDetectorConfig())
    recalls = []
    for miss in (0.0, 0.25, 0.5, 0.75):
        rep = _run_pipeline(dataset, OracleDetectorConfig(miss_rate=miss))
        recalls.append([rep.recall(k) for k in range(5)])
    recalls = np.array(recalls)
    decreasing = bool(np.all(np.diff(recalls, axis=0) < 0))
    elapsed = time.perf_counter() - started
    ok = layout_ok and perfect.map == 1.0 and decreasing and elapsed < 120
    report("AC6", "end-to-end synthetic", ok,
           f"mAP {perfect.map:.3f}, recall by miss rate {np.round(recalls.min(axis=1), 3).tolist()} (min over "
           f"classes), {elapsed:.1f} s")


def test_ac7_training_traces():
    first, _ = simulate([1.0, 0.9, 0.9, 0.9, 0.9])
    flat, ctl = simulate([1.0] * 40)
    falling, falling_ctl = simulate([1.0 - 0.001 * k for k in range(300)])
    ok = (
        [r.epoch for r in first if r.event == "lr_drop"] == [5]
        and [r.epoch for r in flat if r.event == "lr_drop"] == [3, 6]
        and len(flat) == 16 and ctl.stop_reason == "converged"
        and not any(r.event == "lr_drop" for r in falling) and falling_ctl.stop_reason == "max_epochs"
    )
    report("AC7", "training state machine", ok,
           f"drops {[r.epoch for r in first if r.event == 'lr_drop']} and "
           f"{[r.epoch for r in flat if r.event == 'lr_drop']}, flat run stops at epoch {len(flat)}")


def test_ac8_repeat_sampling(dataset):
    live = make_sampler(dataset, SamplerConfig.from_manifest(dataset, batch_size=16))
    sub = make_sampler(dataset, SamplerConfig.from_manifest(dataset, batch_size=16, mode="sub_image"))
    n_tiles = len(sub.tiles)
    live_origins, sub_origins = set(), set()
    for epoch in range(10):
        for b in live.epoch(epoch, with_ground_truth=False):
            live_origins.update((p.slide_id, p.x, p.y) for p in b.patches)
        for b in sub.epoch(epoch, with_ground_truth=False):
            sub_origins.update((p.slide_id, p.x, p.y) for p in b.patches)
    ok = len(sub_origins) <= n_tiles and len(live_origins) >= 2 * n_tiles
    report("AC8", "repeat-sampling contrast", ok,
           f"{n_tiles} tiles, sub-image origins {len(sub_origins)}, live origins {len(live_origins)}")


def _reference_keep(boxes, scores, classes, threshold):
    """Quadratic NMS: torchvision when installed, otherwise blocked all-pairs numpy."""
    try:
        import torch
        from torchvision.ops import batched_nms
    except ImportError:
        return nms_indices(boxes, scores, None, classes, threshold, method="brute"), "numpy all-pairs"
    xyxy = torch.tensor(np.c_[boxes[:, :2], boxes[:, :2] + boxes[:, 2:]], dtype=torch.float64)
    keep = batched_nms(xyxy, torch.tensor(scores, dtype=torch.float64), torch.tensor(classes), threshold)
    return keep.numpy(), "torchvision"


def test_ac9_nms_at_scale():
    rng = np.random.default_rng(9)
    n = 100_000
    boxes = np.c_[rng.uniform(0, 1000, size=(n, 2)), rng.uniform(10, 40, size=(n, 2))]
    scores = rng.random(n)
    classes = rng.integers(0, 5, size=n)
    started = time.perf_counter()
    keep = nms_indices(boxes, scores, None, classes, 0.5)
    elapsed = time.perf_counter() - started
    ref, source = _reference_keep(boxes, scores, classes, 0.5)
    identical = np.array_equal(np.asarray(keep), np.asarray(ref))
    small = [Detection(i, "x", int(c), float(s), *map(float, b))
             for i, (b, s, c) in enumerate(zip(boxes[:3000], scores[:3000], classes[:3000]))]
    objects_agree = [d.id for d in nms(small, 0.5)] == [d.id for d in nms(small, 0.5, method="brute")]
    ok = identical and objects_agree and elapsed < 1.0
    report("AC9", "NMS at scale", ok,
           f"{n} boxes, {len(keep)} kept, identical to {source}: {identical}, {elapsed:.2f} s")


def test_ac10_sync_round_trip(dataset):
    with MockExactServer(dataset, token="acceptance") as server:
        cfg = ServerConfig(server.base_url, "acceptance", "default", timeout=5.0, retry=RetryPolicy(3, 0.05))
        client = ExactClient(cfg)
        pulled = client.pull_dataset(patch_size=dataset.patch_size, seed=dataset.seed)
        detector = OracleDetector(pulled)
        expected, first, again = 0, 0, 0
        for slide in pulled.slides:
            dets = infer_slide(detector, slide, 1024, 256)
            filtered = [d for d in dets if d.score >= 0.85]
            expected += len(filtered)
            before = server.prediction_count
            client.push_predictions(slide.slide_id, dets, pulled.classes.names, min_score=0.85)
            first += server.prediction_count - before
            before = server.prediction_count
            client.push_predictions(slide.slide_id, dets, pulled.classes.names, min_score=0.85)
            again += server.prediction_count - before
        ok = pulled.n_annotations == dataset.n_annotations and first == expected == server.prediction_count \
            and again == 0
    report("AC10", "sync round trip", ok,
           f"pulled {pulled.n_annotations} cells, {first} objects created for {expected} filtered detections, "
           f"re-push added {again}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
