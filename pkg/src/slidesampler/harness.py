"""Pluggable detector seam, a noise-controlled oracle detector, and whole-slide
tiled inference with cross-tile de-duplication."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import ValidationError
from .evaluation import Detection
from .geometry import Rect
from .nms import nms
from .raster import extract_patch, load_raster, metadata_patch
from .rng import stream
from .sampler import PatchSpec


@runtime_checkable
class Detector(Protocol):
    """Anything with ``predict(patch) -> list[Detection]`` in patch-local pixels.

    Learners may also provide ``train_step(batch, patches) -> float`` and
    ``set_learning_rate(lr)`` for use with the training protocol.
    """

    def predict(self, patch): ...


@dataclass(frozen=True)
class OracleDetectorConfig:
    n_classes: int = 5
    miss_rate: tuple = None
    fp_rate: float = 0.0  # expected false positives per pixel of patch area
    jitter_px: float = 0.0
    confusion: np.ndarray = field(default=None, compare=False)
    seed: int = 0
    tp_score: tuple = (0.7, 1.0)
    fp_score: tuple = (0.0, 0.6)

    def __post_init__(self):
        k = self.n_classes
        miss = self.miss_rate
        if miss is None:
            miss = (0.0,) * k
        elif np.isscalar(miss):
            miss = (float(miss),) * k
        object.__setattr__(self, "miss_rate", tuple(float(m) for m in miss))
        conf = np.eye(k) if self.confusion is None else np.asarray(self.confusion, dtype=np.float64)
        object.__setattr__(self, "confusion", conf)
        problems = []
        if len(self.miss_rate) != k or any(not 0.0 <= m <= 1.0 for m in self.miss_rate):
            problems.append(f"miss_rate needs {k} values in [0, 1]")
        if self.fp_rate < 0 or self.jitter_px < 0:
            problems.append("fp_rate and jitter_px must be non-negative")
        if conf.shape != (k, k) or np.any(conf < 0) or not np.allclose(conf.sum(axis=1), 1.0, atol=1e-9):
            problems.append("confusion must be a row-stochastic k x k matrix")
        if problems:
            raise ValidationError(problems)


class OracleDetector:
    """Stand-in detector that reads the manifest's ground truth.

    Every random decision about a real cell is keyed by its annotation id,
    so a cell seen by two overlapping tiles yields the same detection in both.
    Misses are stratified within each class: cells of a class get shuffled
    ranks and cell ``i`` of ``n`` is kept when ``(rank_i + u_i) / n`` is at
    least its miss rate, which keeps each cell's marginal probability exact
    while making recall track ``1 - miss_rate`` closely even for rare classes.
    False positives are keyed by the patch position.
    """

    def __init__(self, manifest, cfg=None):
        self.manifest = manifest
        self.cfg = cfg or OracleDetectorConfig(n_classes=len(manifest.classes))
        self._slides = {s.slide_id: s for s in manifest.slides}
        self._miss_u = {}
        by_class = {}
        for s in manifest.slides:
            for a in s.annotations:
                by_class.setdefault(a.cls, []).append(a.id)
        for cls, ids in sorted(by_class.items()):
            rng = stream(self.cfg.seed, "oracle-miss", cls)
            ranks = rng.permutation(len(ids))
            offsets = rng.random(len(ids))
            for aid, rank, off in zip(sorted(ids), ranks, offsets):
                self._miss_u[aid] = (rank + off) / len(ids)
        self._radii = np.array([
            np.median([a.r for s in manifest.slides for a in s.annotations if a.cls == k] or [manifest.default_radius])
            for k in range(self.cfg.n_classes)
        ])

    def predict(self, patch):
        spec = patch.spec
        slide = self._slides[spec.slide_id]
        return self.predict_spec(slide, spec)

    def predict_spec(self, slide, spec):
        cfg = self.cfg
        rect = spec.rect
        out = []
        for a in slide.annotations_in(rect):
            if self._miss_u[a.id] < cfg.miss_rate[a.cls]:
                continue
            rng = stream(cfg.seed, "oracle-cell", a.id)
            cls = int(rng.choice(cfg.n_classes, p=cfg.confusion[a.cls])) if cfg.confusion[a.cls, a.cls] < 1 else a.cls
            x0, y0 = a.cx - a.r - rect.x, a.cy - a.r - rect.y
            x1, y1 = x0 + 2 * a.r, y0 + 2 * a.r
            if cfg.jitter_px > 0:
                j = rng.uniform(-cfg.jitter_px, cfg.jitter_px, size=4)
                x0, y0, x1, y1 = x0 + j[0], y0 + j[1], x1 + j[2], y1 + j[3]
                x1, y1 = max(x1, x0 + 1.0), max(y1, y0 + 1.0)
            score = float(rng.uniform(*cfg.tp_score))
            out.append(Detection(int(a.id), spec.slide_id, cls, score, float(x0), float(y0),
                                 float(x1 - x0), float(y1 - y0)))
        if cfg.fp_rate > 0:
            rng = stream(cfg.seed, "oracle-fp", spec.key)
            n_fp = int(rng.poisson(cfg.fp_rate * rect.area))
            for k in range(n_fp):
                cls = int(rng.integers(cfg.n_classes))
                side = 2.0 * float(self._radii[cls])
                cx, cy = rng.uniform(0, spec.size, size=2)
                score = float(rng.uniform(*cfg.fp_score))
                # negative ids keep false positives apart from annotation ids
                out.append(Detection(-(k + 1), spec.slide_id, cls, score, float(cx - side / 2),
                                     float(cy - side / 2), side, side))
        return out


def oracle_predict(manifest, cfg, spec):
    """Functional form of :class:`OracleDetector` for a single patch spec."""
    detector = OracleDetector(manifest, cfg)
    return detector.predict_spec(manifest.slide(spec.slide_id), spec)


def _axis_starts(lo, hi, tile, stride, limit):
    if hi - lo <= tile:
        start = min(max(lo, 0), max(limit - tile, 0))
        return [start]
    starts = list(range(lo, hi - tile, stride))
    starts.append(hi - tile)
    return sorted({min(max(s, 0), limit - tile) for s in starts})


def inference_tiles(slide, tile_size=1024, overlap_px=256):
    """Overlapping tiles with stride ``tile_size - overlap_px`` over the screened union."""
    if not 0 <= overlap_px < tile_size:
        raise ValidationError([f"overlap {overlap_px} must be in [0, {tile_size})"])
    bounds = slide.screen_map.bounds()
    if bounds is None:
        return []
    tw, th = min(tile_size, slide.width), min(tile_size, slide.height)
    size = min(tw, th)
    stride = size - overlap_px if overlap_px < size else max(size // 2, 1)
    xs = _axis_starts(bounds.x, bounds.x2, size, stride, slide.width)
    ys = _axis_starts(bounds.y, bounds.y2, size, stride, slide.height)
    tiles = []
    for y in ys:
        for x in xs:
            rect = Rect(x, y, size, size)
            if slide.screen_map.covered_area(x, y, size, size) > 0:
                tiles.append(rect)
    return tiles


def _to_slide(dets, rect):
    return [Detection(d.id, d.image_id, d.cls, d.score, d.x + rect.x, d.y + rect.y, d.w, d.h) for d in dets]


def infer_slide(detector, slide, tile_size=1024, overlap_px=256, manifest=None, image=None,
                nms_threshold=0.5, jobs=1):
    """Run ``detector`` over overlapping tiles of the screened area of one slide.

    Tile outputs are mapped to slide coordinates, same-class boxes with
    IoU >= 0.5 are merged keeping the highest score, and the result goes
    through class-aware NMS.  Ids are reassigned in output order.
    """
    tiles = inference_tiles(slide, tile_size, overlap_px)
    if image is None:
        path = manifest.raster_path(slide) if manifest is not None else slide.raster_source
        if path is not None:
            image = load_raster(str(path))

    def run(rect):
        spec = PatchSpec(slide.slide_id, rect.x, rect.y, rect.w)
        if image is not None:
            patch = extract_patch(slide, spec, image=image)
        else:
            patch = metadata_patch(slide, spec)
        return _to_slide(detector.predict(patch), rect)

    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_tile = list(pool.map(run, tiles))
    else:
        per_tile = [run(t) for t in tiles]
    merged = []
    serial = 0
    for dets in per_tile:
        for d in dets:
            merged.append(Detection(serial, d.image_id, d.cls, d.score, d.x, d.y, d.w, d.h))
            serial += 1
    deduped = nms(merged, 0.5, class_aware=True, inclusive=True)
    kept = nms(deduped, nms_threshold, class_aware=True)
    return [Detection(i, d.image_id, d.cls, d.score, d.x, d.y, d.w, d.h) for i, d in enumerate(kept)]

