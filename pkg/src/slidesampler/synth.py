"""Synthetic slides for desk-scale verification.

Cells are drawn as filled discs with a class-specific colour and radius on a
light background.  Every drawn cell is listed in the returned manifest, so a
perfect detector has a known answer.
"""

import math
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import PlacementOverflow, ValidationError
from .geometry import Rect, ScreenMap
from .model import Annotation, DatasetManifest, SlideManifest, save_manifest, validate
from .rng import stream

# Per-slide cell counts (eosinophil, mast cell, neutrophil, macrophage,
# lymphocyte) and the screened fraction of each slide in the equine BALF set.
REFERENCE_COUNTS = (
    (21, 511, 3301, 3934, 14846),
    (47, 762, 951, 16748, 10342),
    (10, 69, 1321, 3081, 15666),
    (20, 37, 2467, 729, 2144),
    (8, 116, 4491, 1639, 3077),
    (2, 40, 26, 370, 323),
)
REFERENCE_SCREENED = (1.00, 1.00, 0.08, 0.28, 0.43, 0.01)
REFERENCE_ROLES = ("val", "test", "train", "train", "train", "train")
REFERENCE_TOTALS = tuple(sum(col) for col in zip(*REFERENCE_COUNTS))

BACKGROUND = (236, 232, 240)
CLASS_COLORS = (
    (214, 96, 77),    # eosinophil
    (118, 42, 131),   # mast cell
    (67, 147, 195),   # neutrophil
    (191, 129, 45),   # macrophage
    (27, 120, 55),    # lymphocyte
)
CLASS_RADII = (10, 11, 8, 12, 6)


def scale_counts(counts, total):
    """Largest-remainder rounding of ``counts`` rescaled to sum to ``total``.

    Remainder ties go to the earlier class.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() <= 0:
        return [0] * len(counts)
    exact = counts * total / counts.sum()
    base = np.floor(exact).astype(int)
    short = total - int(base.sum())
    order = sorted(range(len(counts)), key=lambda k: (-(exact[k] - base[k]), k))
    for k in order[:short]:
        base[k] += 1
    return base.tolist()


def _render(width, height, cells, colors):
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:] = BACKGROUND
    for cx, cy, r, cls in cells:
        y0, y1 = max(cy - r, 0), min(cy + r + 1, height)
        x0, x1 = max(cx - r, 0), min(cx + r + 1, width)
        yy, xx = np.ogrid[y0:y1, x0:x1]
        disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        pixels[y0:y1, x0:x1][disc] = colors[cls % len(colors)]
    return pixels


def _place(rng, width, height, rects, radii_seq):
    """Rejection-sample centres inside ``rects`` keeping discs apart and on the slide."""
    if not radii_seq:
        return []
    max_r = max(radii_seq)
    cell = 2 * max_r
    grid = {}
    placed = []
    for r in radii_seq:
        regions = []
        for rect in rects:
            x0, x1 = max(rect.x, r), min(rect.x2, width - r)
            y0, y1 = max(rect.y, r), min(rect.y2, height - r)
            if x1 > x0 and y1 > y0:
                regions.append((x0, y0, x1, y1))
        if not regions:
            raise PlacementOverflow(f"no room for a cell of radius {r}")
        areas = np.array([(x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in regions], dtype=np.float64)
        weights = areas / areas.sum()
        for _ in range(2000):
            x0, y0, x1, y1 = regions[int(rng.choice(len(regions), p=weights))]
            cx = int(rng.integers(x0, x1))
            cy = int(rng.integers(y0, y1))
            gx, gy = cx // cell, cy // cell
            clash = False
            for nx in (gx - 1, gx, gx + 1):
                for ny in (gy - 1, gy, gy + 1):
                    for ox, oy, orad in grid.get((nx, ny), ()):
                        if (ox - cx) ** 2 + (oy - cy) ** 2 < (orad + r) ** 2:
                            clash = True
                            break
                    if clash:
                        break
                if clash:
                    break
            if not clash:
                grid.setdefault((gx, gy), []).append((cx, cy, r))
                placed.append((cx, cy))
                break
        else:
            raise PlacementOverflow(
                f"could not place cell {len(placed) + 1} of {len(radii_seq)} at the separation constraint"
            )
    return placed


def generate_synthetic_slide(width, height, screen_rects, class_counts, seed, slide_id="synthetic",
                             out_path=None, radii=CLASS_RADII, colors=CLASS_COLORS, first_id=0,
                             split_role="train", annotator="synthetic"):
    """Render a synthetic slide and its manifest.

    Returns ``(raster_source, SlideManifest)``.  ``raster_source`` is the PNG
    path when ``out_path`` is given, otherwise the pixel array itself.
    """
    rects = [r if isinstance(r, Rect) else Rect(*r) for r in screen_rects]
    if any(c < 0 for c in class_counts):
        raise ValidationError(["class counts must be non-negative"])
    bad = [r.as_list() for r in rects if not r.within(width, height)]
    if bad:
        raise ValidationError([f"screened rect {b} outside {width}x{height} slide" for b in bad])
    rng = stream(seed, "synth", slide_id)
    labels = np.repeat(np.arange(len(class_counts)), class_counts)
    labels = rng.permutation(labels).tolist()
    # big cells first so small ones fill the gaps
    order = sorted(range(len(labels)), key=lambda i: -radii[labels[i]])
    centres = _place(rng, width, height, rects, [radii[labels[i]] for i in order])
    slot = dict(zip(order, centres))
    cells = [(slot[i][0], slot[i][1], radii[labels[i]], labels[i]) for i in range(len(labels))]
    pixels = _render(width, height, cells, colors)
    raster_source = pixels
    if out_path is not None:
        out_path = Path(out_path)
        Image.fromarray(pixels).save(out_path, format="PNG")
        raster_source = str(out_path)
    annotations = [
        Annotation(first_id + i, slide_id, cx, cy, r, cls, annotator) for i, (cx, cy, r, cls) in enumerate(cells)
    ]
    slide = SlideManifest(
        slide_id=slide_id,
        width=width,
        height=height,
        screen_map=ScreenMap(slide_id, rects),
        annotations=annotations,
        raster_source=raster_source if out_path is not None else None,
        split_role=split_role,
    )
    return raster_source, slide


def split_counts(total, per_slide=REFERENCE_COUNTS):
    """Scale a per-slide count matrix to ``total`` cells.

    Class totals are rounded first, then each class total is spread over the
    slides in proportion to the original rows, so both margins stay exact.
    """
    per_slide = np.asarray(per_slide)
    class_totals = scale_counts(per_slide.sum(axis=0), total)
    out = np.zeros_like(per_slide)
    for k, n in enumerate(class_totals):
        out[:, k] = scale_counts(per_slide[:, k], n)
    return out.tolist()


def _screened_layout(n_cells, cell_area, fraction, patch_size, max_side, rng):
    """Slide size and screened rectangles for one synthetic slide."""
    need = max(n_cells * cell_area, (2 * patch_size) ** 2)
    side = math.ceil(math.sqrt(need))
    if fraction >= 1.0:
        return side, side, [Rect(0, 0, side, side)]
    # two overlapping rectangles forming a step-shaped union
    while True:
        wa = math.ceil(side * 0.6)
        wb = side - wa
        drop = side // 4
        overlap = min(patch_size // 2, wa // 2)
        area = wa * side + wb * (side - drop)
        if area >= need:
            break
        side += 8
    region_w = side
    slide_side = min(max_side, max(math.ceil(math.sqrt(area / fraction)), region_w + 2 * patch_size))
    ox = int(rng.integers(0, slide_side - region_w + 1))
    oy = int(rng.integers(0, slide_side - side + 1))
    rects = [
        Rect(ox, oy, wa, side),
        Rect(ox + wa - overlap, oy + drop, wb + overlap, side - drop),
    ]
    return slide_side, slide_side, rects


def synthetic_dataset(out_dir=None, total=5000, seed=0, patch_size=256, epoch_length=500,
                      cell_area=1200, max_side=3072):
    """Six synthetic slides with the class proportions of the equine BALF set.

    Two fully screened slides take the val/test roles and four partially
    screened slides form the training set, mirroring the cross-validation
    layout.  With ``out_dir`` the rasters and ``manifest.json`` are written
    there and the slides reference their PNGs by file name.
    """
    counts = split_counts(total)
    rng = stream(seed, "dataset-layout")
    slides = []
    next_id = 1
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for k, (row, fraction, role) in enumerate(zip(counts, REFERENCE_SCREENED, REFERENCE_ROLES), start=1):
        sid = f"slide{k}"
        width, height, rects = _screened_layout(sum(row), cell_area, fraction, patch_size, max_side, rng)
        out_path = out_dir / f"{sid}.png" if out_dir is not None else None
        _, slide = generate_synthetic_slide(width, height, rects, row, seed, slide_id=sid, out_path=out_path,
                                            first_id=next_id, split_role=role)
        if out_path is not None:
            slide = replace(slide, raster_source=out_path.name)
        next_id += len(slide.annotations)
        slides.append(slide)
    manifest = DatasetManifest(slides=slides, patch_size=patch_size, seed=seed, epoch_length=epoch_length,
                               base_dir=str(out_dir) if out_dir is not None else None)
    validate(manifest)
    if out_dir is not None:
        save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def reference_manifest(seed=0, spacing=64, radius=25, patch_size=1024, roles=REFERENCE_ROLES):
    """Metadata-only manifest holding exactly the reference cell counts.

    Cells sit on a shuffled square lattice inside one screened rectangle per
    slide, sized so the screened fraction of each slide matches the table.
    """
    slides = []
    next_id = 1
    for k, (row, fraction, role) in enumerate(zip(REFERENCE_COUNTS, REFERENCE_SCREENED, roles), start=1):
        sid = f"slide{k}"
        rng = stream(seed, "reference", k)
        n = sum(row)
        per_side = math.ceil(math.sqrt(n))
        region = per_side * spacing
        side = math.ceil(region / math.sqrt(fraction))
        ox = (side - region) // 2
        oy = (side - region) // 2
        lattice = rng.permutation(per_side * per_side)[:n]
        labels = rng.permutation(np.repeat(np.arange(len(row)), row))
        gx, gy = lattice % per_side, lattice // per_side
        cx = ox + gx * spacing + spacing // 2
        cy = oy + gy * spacing + spacing // 2
        anns = [
            Annotation(next_id + i, sid, int(x), int(y), radius, int(c), "expert")
            for i, (x, y, c) in enumerate(zip(cx.tolist(), cy.tolist(), labels.tolist()))
        ]
        next_id += n
        slides.append(
            SlideManifest(sid, side, side, ScreenMap(sid, [Rect(ox, oy, region, region)]), anns, None, role)
        )
    return DatasetManifest(slides=slides, patch_size=patch_size, seed=seed)

