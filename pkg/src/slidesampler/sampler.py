"""Training-patch generators.

Two modes share one class-balancing scheme: every batch first gets one patch
per cell class (in shuffled order) and the remaining slots draw classes with
probability proportional to ``1 - p_k``, where ``p_k`` is the relative class
frequency over the training slides.

``live``
    Patches are centred on an expert-annotated seed cell chosen uniformly from
    all eligible seeds of the class, pooled across training slides.  A seed is
    eligible when its whole patch lies inside the screened union.

``sub_image``
    Patches coincide with pre-extracted, fully screened tiles.  For a chosen
    class, a tile containing at least one cell of that class is picked
    uniformly.
"""

import json
import logging
import math
import weakref
from dataclasses import dataclass

import numpy as np

from .errors import NoEligibleSeeds, NoTileForClass, ValidationError
from .geometry import Rect, eligible_seeds, tile_sub_images
from .model import class_frequencies
from .rng import stream

log = logging.getLogger(__name__)

MODES = ("live", "sub_image")


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: int = 1024
    batch_size: int = 16
    epoch_length: int = 500
    mode: str = "live"
    seed: int = 0
    strict: bool = False

    @classmethod
    def from_manifest(cls, manifest, **overrides):
        base = dict(patch_size=manifest.patch_size, epoch_length=manifest.epoch_length, seed=manifest.seed)
        base.update(overrides)
        return cls(**base)

    def validate(self, n_classes):
        problems = []
        if self.mode not in MODES:
            problems.append(f"unknown sampling mode {self.mode!r}")
        if self.patch_size <= 0 or self.patch_size % 2:
            problems.append(f"patch_size must be even and positive, got {self.patch_size}")
        if self.batch_size <= 0:
            problems.append(f"batch_size must be positive, got {self.batch_size}")
        if self.mode == "live" and self.batch_size < n_classes:
            problems.append(f"live batch_size {self.batch_size} is smaller than the {n_classes} classes")
        if self.epoch_length < self.batch_size:
            problems.append(f"epoch_length {self.epoch_length} is smaller than batch_size {self.batch_size}")
        if problems:
            raise ValidationError(problems)
        return self


@dataclass(frozen=True)
class GroundTruthCell:
    """An annotation inside a patch, in patch-local coordinates."""

    id: int
    cls: int
    x: int
    y: int
    r: int


@dataclass(frozen=True)
class PatchSpec:
    slide_id: str
    x: int
    y: int
    size: int
    seed_annotation_id: int = None
    source_tile: Rect = None

    @property
    def rect(self):
        return Rect(self.x, self.y, self.size, self.size)

    @property
    def key(self):
        return f"{self.slide_id}@{self.x},{self.y},{self.size}"


@dataclass(frozen=True)
class BatchSpec:
    patches: tuple
    ground_truth: tuple = None
    epoch: int = 0
    index: int = 0
    seed_classes: tuple = ()

    def __len__(self):
        return len(self.patches)


def extra_class_distribution(freqs):
    """Probability of each class for the slots beyond the guaranteed ones.

    ``P(k) = (1 - p_k) / sum_j (1 - p_j)``.  A single-class registry has a 0/0
    form and gets probability 1.
    """
    p = np.asarray(freqs.frequencies, dtype=np.float64)
    if p.size == 1:
        return np.ones(1)
    weights = 1.0 - p
    total = weights.sum()
    if total <= 0:
        return np.full(p.size, 1.0 / p.size)
    return weights / total


def draw_batch_classes(rng, probs, available, batch_size):
    """Guaranteed one-per-class slots (shuffled) followed by i.i.d. extra slots.

    Classes marked unavailable lose their guaranteed slot and their extra-slot
    probability is spread proportionally over the remaining classes.
    """
    available = np.asarray(available, dtype=bool)
    avail_ids = np.flatnonzero(available)
    guaranteed = rng.permutation(avail_ids)
    n_extra = batch_size - len(guaranteed)
    if n_extra <= 0:
        return guaranteed[:batch_size].tolist()
    p = np.where(available, probs, 0.0)
    if p.sum() <= 0:
        p = available.astype(np.float64)
    p = p / p.sum()
    extra = rng.choice(len(p), size=n_extra, p=p)
    return guaranteed.tolist() + extra.tolist()


def _ground_truth(slide, rect):
    return tuple(
        GroundTruthCell(a.id, a.cls, a.cx - rect.x, a.cy - rect.y, a.r) for a in slide.annotations_in(rect)
    )


class _BaseSampler:
    mode = None

    def __init__(self, manifest, cfg, roles=("train",)):
        self.manifest = manifest
        self.cfg = cfg.validate(len(manifest.classes))
        self.freqs = class_frequencies(manifest, roles)
        self.probs = extra_class_distribution(self.freqs)
        self._slides = {s.slide_id: s for s in manifest.slides}

    def _missing(self, available, error):
        names = self.manifest.classes.names
        for k in np.flatnonzero(~np.asarray(available)):
            if self.cfg.strict:
                raise error(names[k])
            log.warning("class %r has no usable %s; redistributing its probability mass",
                        names[k], "seed cells" if self.mode == "live" else "tiles")
        if not np.any(available):
            raise error(", ".join(names))

    def sample(self, rng, epoch=0, index=0, with_ground_truth=True):
        classes = draw_batch_classes(rng, self.probs, self.available, self.cfg.batch_size)
        patches = tuple(self._patch_for(k, rng) for k in classes)
        gt = None
        if with_ground_truth:
            gt = tuple(_ground_truth(self._slides[p.slide_id], p.rect) for p in patches)
        return BatchSpec(patches, gt, epoch, index, tuple(classes))

    def batch(self, epoch, index, with_ground_truth=True):
        rng = stream(self.cfg.seed, self.mode, epoch, index)
        return self.sample(rng, epoch, index, with_ground_truth)

    def epoch(self, epoch=0, with_ground_truth=True):
        n = math.ceil(self.cfg.epoch_length / self.cfg.batch_size)
        for index in range(n):
            yield self.batch(epoch, index, with_ground_truth)


class LiveSampler(_BaseSampler):
    mode = "live"

    def __init__(self, manifest, cfg, roles=("train",)):
        super().__init__(manifest, cfg, roles)
        n = len(manifest.classes)
        pools = [[] for _ in range(n)]
        for slide in manifest.slides:
            if slide.split_role not in roles:
                continue
            for a in eligible_seeds(slide.screen_map, slide.annotations, cfg.patch_size):
                pools[a.cls].append(a)
        self.pools = pools
        self.available = np.array([len(p) > 0 for p in pools])
        self._missing(self.available, NoEligibleSeeds)

    def _patch_for(self, cls, rng):
        pool = self.pools[cls]
        a = pool[int(rng.integers(len(pool)))]
        half = self.cfg.patch_size // 2
        return PatchSpec(a.slide_id, a.cx - half, a.cy - half, self.cfg.patch_size, seed_annotation_id=a.id)


class SubImageSampler(_BaseSampler):
    mode = "sub_image"

    def __init__(self, manifest, cfg, tiles=None, roles=("train",)):
        super().__init__(manifest, cfg, roles)
        if tiles is None:
            tiles = {
                s.slide_id: tile_sub_images(s.screen_map, cfg.patch_size)
                for s in manifest.slides
                if s.split_role in roles
            }
        self.tiles = [(sid, rect) for sid, rects in tiles.items() for rect in rects]
        if not self.tiles:
            raise ValidationError(["no sub-image tiles available"])
        n = len(manifest.classes)
        pools = [[] for _ in range(n)]
        for t, (sid, rect) in enumerate(self.tiles):
            for k in sorted({a.cls for a in self._slides[sid].annotations_in(rect)}):
                pools[k].append(t)
        self.pools = pools
        self.available = np.array([len(p) > 0 for p in pools])
        self._missing(self.available, NoTileForClass)

    def _patch_for(self, cls, rng):
        pool = self.pools[cls]
        sid, rect = self.tiles[pool[int(rng.integers(len(pool)))]]
        return PatchSpec(sid, rect.x, rect.y, rect.w, source_tile=rect)


_cache = {}


def _sampler(manifest, cfg, tiles=None):
    key = (id(manifest), cfg, id(tiles))
    hit = _cache.get(key)
    if hit is not None and hit[0]() is manifest:
        return hit[1]
    sampler = LiveSampler(manifest, cfg) if cfg.mode == "live" else SubImageSampler(manifest, cfg, tiles)
    _cache[key] = (weakref.ref(manifest), sampler)
    return sampler


def make_sampler(manifest, cfg, tiles=None):
    return _sampler(manifest, cfg, tiles)


def next_batch_live(manifest, cfg, rng, with_ground_truth=True):
    if cfg.mode != "live":
        raise ValidationError([f"next_batch_live called with mode {cfg.mode!r}"])
    return _sampler(manifest, cfg).sample(rng, with_ground_truth=with_ground_truth)


def next_batch_subimage(manifest, tiles, cfg, rng, with_ground_truth=True):
    """One sub-image batch; ``tiles`` maps slide_id to its list of tile Rects."""
    if cfg.mode != "sub_image":
        raise ValidationError([f"next_batch_subimage called with mode {cfg.mode!r}"])
    return _sampler(manifest, cfg, tiles).sample(rng, with_ground_truth=with_ground_truth)


def epoch_stream(manifest, cfg, epoch=0, with_ground_truth=True):
    """Deterministic batches for one epoch; the last batch is full, so the
    epoch may overshoot ``epoch_length`` to the next batch boundary."""
    return _sampler(manifest, cfg).epoch(epoch, with_ground_truth)


def patch_records(batches, class_names):
    for batch in batches:
        for slot, (patch, gt) in enumerate(zip(batch.patches, batch.ground_truth)):
            yield {
                "epoch": batch.epoch,
                "batch": batch.index,
                "slot": slot,
                "slide_id": patch.slide_id,
                "x": patch.x,
                "y": patch.y,
                "size": patch.size,
                "seed_annotation_id": patch.seed_annotation_id,
                "source_tile": patch.source_tile.as_list() if patch.source_tile else None,
                "annotations": [
                    {"id": c.id, "cx": c.x, "cy": c.y, "r": c.r, "class": class_names[c.cls]} for c in gt
                ],
            }


def write_patch_manifest(batches, class_names, fh):
    for rec in patch_records(batches, class_names):
        fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
