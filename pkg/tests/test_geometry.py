from itertools import combinations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mask_covers, raster_mask
from slidesampler.geometry import (Rect, ScreenMap, covers, eligible_seeds, normalize, patch_rect,
                                   tile_sub_images)
from slidesampler.model import Annotation

GRID = 64


def rects_strategy(max_rects=6, grid=GRID):
    def build(t):
        x, y, w, h = t
        return Rect(x, y, min(w, grid - x), min(h, grid - y))

    one = st.tuples(st.integers(0, grid - 1), st.integers(0, grid - 1), st.integers(1, grid),
                    st.integers(1, grid)).map(build)
    return st.lists(one, min_size=1, max_size=max_rects)


def inclusion_exclusion_area(rects):
    total = 0
    for k in range(1, len(rects) + 1):
        for subset in combinations(rects, k):
            x0 = max(r.x for r in subset)
            y0 = max(r.y for r in subset)
            x1 = min(r.x2 for r in subset)
            y1 = min(r.y2 for r in subset)
            if x1 > x0 and y1 > y0:
                total += (-1) ** (k + 1) * (x1 - x0) * (y1 - y0)
    return total


def test_covers_examples():
    m = ScreenMap("s", [Rect(0, 0, 2048, 2048)])
    assert covers(m, Rect(512, 512, 1024, 1024))
    assert not covers(m, Rect(1536, 0, 1024, 1024))


def test_covers_across_seam_matches_pixels():
    rects = [Rect(0, 0, 100, 100), Rect(100, 0, 100, 100)]
    m = ScreenMap("s", rects)
    q = Rect(50, 0, 100, 100)
    assert covers(m, q)
    assert mask_covers(raster_mask(rects, 200, 100), q)


def test_rect_rejects_empty():
    import pytest

    with pytest.raises(ValueError):
        Rect(0, 0, 0, 5)


def test_eligible_seed_examples():
    m = ScreenMap("s", [Rect(0, 0, 2048, 2048)])
    a = Annotation(1, "s", 512, 512, 10, 0, "")
    b = Annotation(2, "s", 511, 512, 10, 0, "")
    assert eligible_seeds(m, [a, b], 1024) == [a]
    assert patch_rect(512, 512, 1024) == Rect(0, 0, 1024, 1024)


def test_eligible_seeds_l_shape_matches_pixel_oracle():
    rects = [Rect(0, 0, 600, 200), Rect(0, 200, 200, 400)]
    m = ScreenMap("s", rects)
    mask = raster_mask(rects, 600, 600)
    rng = np.random.default_rng(11)
    anns = []
    for i in range(50):
        r = rects[i % 2]
        anns.append(Annotation(i, "s", int(rng.integers(r.x, r.x2)), int(rng.integers(r.y, r.y2)), 5, 0, ""))
    got = eligible_seeds(m, anns, 128)
    expected = [a for a in anns if mask_covers(mask, Rect(a.cx - 64, a.cy - 64, 128, 128))]
    assert got == expected
    assert 0 < len(expected) < 50


def test_eligible_seeds_rejects_odd_patch():
    import pytest

    with pytest.raises(ValueError):
        eligible_seeds(ScreenMap("s", [Rect(0, 0, 10, 10)]), [], 7)


def test_tile_examples():
    assert len(tile_sub_images(ScreenMap("s", [Rect(0, 0, 4096, 2048)]), 1024)) == 8
    assert tile_sub_images(ScreenMap("s", [Rect(0, 0, 1000, 1000)]), 1024) == []


def test_tiles_row_major_order():
    tiles = tile_sub_images(ScreenMap("s", [Rect(0, 0, 4096, 2048)]), 1024)
    assert tiles == sorted(tiles, key=lambda t: (t.y, t.x))


@settings(max_examples=200, deadline=None)
@given(rects_strategy(), st.tuples(st.integers(0, GRID - 1), st.integers(0, GRID - 1), st.integers(1, GRID),
                                   st.integers(1, GRID)))
def test_covers_equals_raster_containment(rects, q):
    query = Rect(*q)
    mask = raster_mask(rects, GRID, GRID)
    assert covers(ScreenMap("s", rects), query) == mask_covers(mask, query)


@settings(max_examples=200, deadline=None)
@given(rects_strategy())
def test_normalized_area_is_inclusion_exclusion(rects):
    m = ScreenMap("s", rects)
    assert m.area == inclusion_exclusion_area(rects)
    assert m.area <= sum(r.area for r in rects)


@settings(max_examples=150, deadline=None)
@given(rects_strategy())
def test_normalized_is_disjoint_and_same_point_set(rects):
    norm = normalize(rects)
    for a, b in combinations(norm, 2):
        assert not a.overlaps(b)
    assert np.array_equal(raster_mask(norm, GRID, GRID), raster_mask(rects, GRID, GRID))


@settings(max_examples=100, deadline=None)
@given(rects_strategy(max_rects=4), rects_strategy(max_rects=1), st.integers(1, 8))
def test_eligibility_is_monotone(rects, extra, half):
    anns = [Annotation(i, "s", x, y, 1, 0, "") for i, (x, y) in
            enumerate((x, y) for x in range(0, GRID, 7) for y in range(0, GRID, 7))]
    before = {a.id for a in eligible_seeds(ScreenMap("s", rects), anns, 2 * half)}
    after = {a.id for a in eligible_seeds(ScreenMap("s", rects + extra), anns, 2 * half)}
    assert before <= after


@settings(max_examples=100, deadline=None)
@given(rects_strategy(), st.integers(2, 24))
def test_tiles_disjoint_covered_and_idempotent(rects, size):
    m = ScreenMap("s", rects)
    tiles = tile_sub_images(m, size)
    mask = raster_mask(rects, GRID, GRID)
    for t in tiles:
        assert t.w == t.h == size
        assert mask_covers(mask, t)
    for a, b in combinations(tiles, 2):
        assert not a.overlaps(b)
    assert tile_sub_images(ScreenMap("s", m.normalized), size) == tiles


def test_contains_points_vectorised():
    rects = [Rect(10, 10, 20, 20), Rect(25, 5, 10, 10)]
    m = ScreenMap("s", rects)
    mask = raster_mask(rects, 50, 50)
    ys, xs = np.mgrid[0:50, 0:50]
    assert np.array_equal(m.contains_points(xs.ravel(), ys.ravel()), mask.ravel())
