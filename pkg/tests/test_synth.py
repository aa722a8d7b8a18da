from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from slidesampler.errors import PlacementOverflow
from slidesampler.model import class_frequencies, load_manifest
from slidesampler.synth import (BACKGROUND, CLASS_COLORS, REFERENCE_TOTALS, generate_synthetic_slide, scale_counts,
                                split_counts)


def largest_remainder(counts, total):
    quotas = [Fraction(c * total, sum(counts)) for c in counts]
    floors = [q.numerator // q.denominator for q in quotas]
    order = sorted(range(len(counts)), key=lambda k: (-(quotas[k] - floors[k]), k))
    for k in order[:total - sum(floors)]:
        floors[k] += 1
    return floors


def test_scale_counts_to_thousand():
    assert list(scale_counts(REFERENCE_TOTALS, 1000)) == largest_remainder(REFERENCE_TOTALS, 1000)
    assert list(scale_counts(REFERENCE_TOTALS, 1000)) == [1, 18, 144, 304, 533]


def test_split_counts_totals():
    rows = split_counts(5000)
    totals = np.array(rows).sum(axis=0)
    assert totals.sum() == 5000
    assert list(totals) == largest_remainder(REFERENCE_TOTALS, 5000)


def test_zero_counts_blank_slide():
    image, slide = generate_synthetic_slide(64, 48, [(0, 0, 64, 48)], (0, 0, 0, 0, 0), seed=1)
    assert len(slide.annotations) == 0
    assert (image == np.array(BACKGROUND, dtype=np.uint8)).all()


def test_deterministic(tmp_path):
    a_path, a = generate_synthetic_slide(300, 200, [(0, 0, 150, 200)], (1, 2, 3, 4, 5), seed=4,
                                         out_path=tmp_path / "a.png")
    b_path, b = generate_synthetic_slide(300, 200, [(0, 0, 150, 200)], (1, 2, 3, 4, 5), seed=4,
                                         out_path=tmp_path / "b.png")
    assert Path(a_path).read_bytes() == Path(b_path).read_bytes()
    assert a.annotations == b.annotations


def test_cells_inside_screened_rects_and_separated():
    rects = [(0, 0, 200, 200), (300, 100, 150, 150)]
    _, slide = generate_synthetic_slide(500, 300, rects, (5, 5, 5, 5, 5), seed=6)
    assert len(slide.annotations) == 25
    for a in slide.annotations:
        assert any(x <= a.cx < x + w and y <= a.cy < y + h for x, y, w, h in rects)
    anns = slide.annotations
    for i, a in enumerate(anns):
        for b in anns[i + 1:]:
            assert (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 >= (a.r + b.r) ** 2


def test_disc_centroids_and_colours():
    image, slide = generate_synthetic_slide(400, 400, [(0, 0, 400, 400)], (2, 2, 2, 2, 2), seed=9)
    for a in slide.annotations:
        y0, x0 = a.cy - a.r, a.cx - a.r
        window = image[y0:a.cy + a.r + 1, x0:a.cx + a.r + 1]
        mask = (window == np.array(CLASS_COLORS[a.cls], dtype=np.uint8)).all(axis=2)
        ys, xs = np.nonzero(mask)
        assert abs(xs.mean() + x0 - a.cx) <= 0.5
        assert abs(ys.mean() + y0 - a.cy) <= 0.5


def test_placement_overflow():
    with pytest.raises(PlacementOverflow):
        generate_synthetic_slide(40, 40, [(0, 0, 40, 40)], (0, 0, 0, 0, 200), seed=0)


def test_synthetic_dataset_layout(synthetic):
    roles = [s.split_role for s in synthetic.slides]
    assert roles == ["val", "test", "train", "train", "train", "train"]
    assert synthetic.n_annotations == 5000
    for s in synthetic.slides[:2]:
        assert s.screen_map.area == s.width * s.height
    for s in synthetic.slides[2:]:
        assert s.screen_map.area < s.width * s.height
    freqs = class_frequencies(synthetic, roles={"train", "val", "test"})
    assert list(freqs.counts) == largest_remainder(REFERENCE_TOTALS, 5000)


def test_synthetic_dataset_files(synthetic):
    path = synthetic.raster_path(synthetic.slides[0])
    with Image.open(path) as im:
        assert im.size == (synthetic.slides[0].width, synthetic.slides[0].height)
    reloaded = load_manifest(path.parent / "manifest.json")
    assert reloaded.slides == synthetic.slides
