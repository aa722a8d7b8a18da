"""Pixel extraction for patch specs and the training augmentation suite."""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import MissingRaster, OutOfBounds

log = logging.getLogger(__name__)

MIN_RETAINED_AREA = 0.25


@dataclass(frozen=True)
class GTBox:
    annotation_id: int
    cls: int
    x: float
    y: float
    w: float
    h: float

    @property
    def area(self):
        return self.w * self.h

    @property
    def corners(self):
        return ((self.x, self.y), (self.x + self.w, self.y),
                (self.x, self.y + self.h), (self.x + self.w, self.y + self.h))


@dataclass(frozen=True)
class Patch:
    """Patch pixels plus patch-local ground truth.

    ``pixels`` is ``None`` in metadata-only mode (slides without a raster).
    ``context`` optionally holds a larger window centred on the patch, used
    for rotation without border fill; ``context_boxes`` are the cells inside
    that window.  ``audit`` records boxes dropped by augmentation.
    """

    pixels: np.ndarray
    spec: object
    boxes: tuple = ()
    context: np.ndarray = field(default=None, repr=False)
    context_margin: int = 0
    context_boxes: tuple = ()
    audit: tuple = ()

    @property
    def size(self):
        return self.spec.size


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_deg: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    intensity_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.rotation_deg <= 90.0:
            raise ValueError(f"rotation must be in [0, 90], got {self.rotation_deg}")
        if not 0.8 <= self.intensity_scale <= 1.2:
            raise ValueError(f"intensity scale must be in [0.8, 1.2], got {self.intensity_scale}")

    @classmethod
    def sample(cls, rng):
        return cls(
            rotation_deg=float(rng.uniform(0.0, 90.0)),
            flip_h=bool(rng.random() < 0.5),
            flip_v=bool(rng.random() < 0.5),
            intensity_scale=float(rng.uniform(0.8, 1.2)),
        )

    @property
    def is_identity(self):
        return self.rotation_deg == 0 and not self.flip_h and not self.flip_v and self.intensity_scale == 1.0


@lru_cache(maxsize=8)
def load_raster(path):
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"))
    pixels.setflags(write=False)
    return pixels


def context_margin(size):
    """Margin that lets any rotation of the patch be cut from the enlarged window."""
    return math.ceil(size * (math.sqrt(2) - 1) / 2) + 1


def _boxes_in(slide, x0, y0, x1, y1, clip_to=None):
    cols = slide.arrays
    lo = np.searchsorted(cols["cx"], x0, side="left")
    hi = np.searchsorted(cols["cx"], x1, side="left")
    out = []
    for k in range(lo, hi):
        cy = int(cols["cy"][k])
        if not y0 <= cy < y1:
            continue
        cx, r = int(cols["cx"][k]), int(cols["r"][k])
        bx0, by0, bx1, by1 = cx - r - x0, cy - r - y0, cx + r - x0, cy + r - y0
        if clip_to is not None:
            bx0, by0 = max(bx0, 0), max(by0, 0)
            bx1, by1 = min(bx1, clip_to), min(by1, clip_to)
        out.append((int(cols["index"][k]), GTBox(int(cols["id"][k]), int(cols["cls"][k]),
                                                  float(bx0), float(by0), float(bx1 - bx0), float(by1 - by0))))
    out.sort(key=lambda t: t[0])
    return tuple(b for _, b in out)


def extract_patch(slide, spec, image=None, with_context=False, manifest=None):
    """Copy the patch pixels from the slide raster and attach ground truth.

    ``image`` may be passed directly (an H x W x 3 array); otherwise the
    slide's raster_source is loaded, resolved against ``manifest.base_dir``
    when a manifest is given.
    """
    rect = spec.rect
    if not rect.within(slide.width, slide.height):
        raise OutOfBounds(f"patch {rect.as_list()} exceeds slide {slide.slide_id!r} "
                          f"({slide.width}x{slide.height})")
    if image is None:
        path = manifest.raster_path(slide) if manifest is not None else slide.raster_source
        if path is None:
            raise MissingRaster(f"slide {slide.slide_id!r} has no raster_source (metadata-only)")
        image = load_raster(str(path))
    pixels = np.array(image[rect.y:rect.y2, rect.x:rect.x2], dtype=np.uint8)
    boxes = _boxes_in(slide, rect.x, rect.y, rect.x2, rect.y2, clip_to=spec.size)
    context = None
    margin = 0
    context_boxes = ()
    if with_context:
        margin = context_margin(spec.size)
        y0, y1 = rect.y - margin, rect.y2 + margin
        x0, x1 = rect.x - margin, rect.x2 + margin
        cy0, cy1 = max(y0, 0), min(y1, slide.height)
        cx0, cx1 = max(x0, 0), min(x1, slide.width)
        window = np.asarray(image[cy0:cy1, cx0:cx1])
        pad = ((cy0 - y0, y1 - cy1), (cx0 - x0, x1 - cx1), (0, 0))
        context = np.pad(window, pad, mode="reflect") if any(p for p in pad[:2] for p in p) else np.array(window)
        context_boxes = tuple(
            replace(b, x=b.x - margin, y=b.y - margin) for b in _boxes_in(slide, x0, y0, x1, y1)
        )
    return Patch(pixels, spec, boxes, context, margin, context_boxes)


def metadata_patch(slide, spec):
    """A pixel-less patch for slides without a raster."""
    rect = spec.rect
    return Patch(None, spec, _boxes_in(slide, rect.x, rect.y, rect.x2, rect.y2, clip_to=spec.size))


def _forward(points, size, aug):
    """Map patch-local points through rotation then flips."""
    c = size / 2.0
    theta = math.radians(aug.rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    if aug.rotation_deg == 90:
        cos, sin = 0.0, 1.0
    dx = points[:, 0] - c
    dy = points[:, 1] - c
    x = c + dx * cos + dy * sin
    y = c - dx * sin + dy * cos
    if aug.flip_h:
        x = size - x
    if aug.flip_v:
        y = size - y
    return np.stack([x, y], axis=1)


def transform_box(box, size, aug):
    """Axis-aligned hull of the transformed box corners, before clipping."""
    pts = _forward(np.array(box.corners, dtype=np.float64), size, aug)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return replace(box, x=float(x0), y=float(y0), w=float(x1 - x0), h=float(y1 - y0))


def _clip(box, size):
    x0, y0 = max(box.x, 0.0), max(box.y, 0.0)
    x1, y1 = min(box.x + box.w, float(size)), min(box.y + box.h, float(size))
    if x1 <= x0 or y1 <= y0:
        return None
    return replace(box, x=x0, y=y0, w=x1 - x0, h=y1 - y0)


def _rotate_pixels(patch, aug):
    size = patch.size
    quarter = aug.rotation_deg in (0, 90)
    if quarter:
        return np.rot90(patch.pixels) if aug.rotation_deg == 90 else patch.pixels
    # inverse-map every output pixel centre into the source and sample bilinearly
    c = size / 2.0
    theta = math.radians(aug.rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    jj, ii = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    dx, dy = jj - c, ii - c
    sx = c + dx * cos - dy * sin
    sy = c + dx * sin + dy * cos
    if patch.context is not None:
        source, offset, mode = patch.context, patch.context_margin, "nearest"
    else:
        source, offset, mode = patch.pixels, 0, "reflect"
    coords = [sy - 0.5 + offset, sx - 0.5 + offset]
    out = np.empty_like(patch.pixels)
    for ch in range(source.shape[2]):
        sampled = ndimage.map_coordinates(source[:, :, ch].astype(np.float64), coords, order=1, mode=mode)
        out[:, :, ch] = np.clip(np.floor(sampled + 0.5), 0, 255).astype(np.uint8)
    return out


def scale_intensity(pixels, scale):
    """``clamp(round(v * scale), 0, 255)`` with round-half-up."""
    if scale == 1.0:
        return pixels
    return np.clip(np.floor(pixels.astype(np.float64) * scale + 0.5), 0, 255).astype(np.uint8)


def augment(patch, aug, rng=None):
    """Apply rotation, flips and intensity scaling to pixels and boxes alike.

    Rotation is about the patch centre (counter-clockwise as displayed),
    followed by the horizontal then vertical flip.  Boxes become the
    axis-aligned hull of their rotated corners, clipped to the patch; a box
    keeping less than a quarter of its hull area is dropped and recorded in
    ``audit``.  Passing ``rng`` instead of a spec samples a random one.
    """
    if aug is None:
        aug = AugmentationSpec.sample(rng)
    if aug.is_identity:
        return patch
    size = patch.size
    pixels = patch.pixels
    if pixels is not None:
        pixels = _rotate_pixels(patch, aug)
        if aug.flip_h:
            pixels = pixels[:, ::-1]
        if aug.flip_v:
            pixels = pixels[::-1, :]
        pixels = np.ascontiguousarray(scale_intensity(pixels, aug.intensity_scale))

    original = {b.annotation_id for b in patch.boxes}
    candidates = patch.context_boxes if patch.context_boxes and aug.rotation_deg not in (0, 90) else patch.boxes
    kept, audit = [], list(patch.audit)
    for box in candidates:
        hull = transform_box(box, size, aug)
        clipped = _clip(hull, size)
        if clipped is not None and clipped.area >= MIN_RETAINED_AREA * hull.area:
            kept.append(clipped)
        elif box.annotation_id in original:
            audit.append({"annotation_id": box.annotation_id, "reason": "clipped below minimum area",
                          "retained": 0.0 if clipped is None else clipped.area / hull.area})
            log.debug("dropped box %s after augmentation", box.annotation_id)
    return Patch(pixels, patch.spec, tuple(kept), None, 0, (), tuple(audit))
