"""Integer rectangle-union arithmetic for screened slide areas.

All coordinates are integer pixels with the origin at the top-left corner.
A rectangle ``Rect(x, y, w, h)`` covers the half-open pixel range
``[x, x + w) x [y, y + h)``.
"""

from dataclasses import dataclass, field
from functools import cached_property
from itertools import pairwise

import numpy as np


@dataclass(frozen=True, order=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"rectangle must have positive size, got {self}")

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    @property
    def area(self):
        return self.w * self.h

    def as_list(self):
        return [self.x, self.y, self.w, self.h]

    def intersection_area(self, other):
        ix = min(self.x2, other.x2) - max(self.x, other.x)
        iy = min(self.y2, other.y2) - max(self.y, other.y)
        return ix * iy if ix > 0 and iy > 0 else 0

    def overlaps(self, other):
        return self.intersection_area(other) > 0

    def contains_point(self, px, py):
        return self.x <= px < self.x2 and self.y <= py < self.y2

    def within(self, width, height):
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height


def _merge_intervals(intervals):
    merged = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return tuple((lo, hi) for lo, hi in merged)


def normalize(rects):
    """Decompose a union of rectangles into disjoint rectangles.

    The plane is cut into vertical slabs at every distinct x edge; inside a
    slab the covered y-intervals are merged.  Neighbouring slabs with the same
    interval set are fused again so simple inputs come back unchanged.
    """
    rects = list(rects)
    if not rects:
        return ()
    xs = sorted({r.x for r in rects} | {r.x2 for r in rects})
    slabs = []
    for x0, x1 in pairwise(xs):
        spans = [(r.y, r.y2) for r in rects if r.x <= x0 and r.x2 >= x1]
        if not spans:
            continue
        intervals = _merge_intervals(spans)
        if slabs and slabs[-1][1] == x0 and slabs[-1][2] == intervals:
            slabs[-1] = (slabs[-1][0], x1, intervals)
        else:
            slabs.append((x0, x1, intervals))
    return tuple(
        Rect(x0, y0, x1 - x0, y1 - y0) for x0, x1, intervals in slabs for y0, y1 in intervals
    )


@dataclass(frozen=True)
class ScreenMap:
    """The union of rectangles an expert has screened on one slide."""

    slide_id: str
    rects: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "rects", tuple(self.rects))

    @cached_property
    def normalized(self):
        return normalize(self.rects)

    @cached_property
    def _edges(self):
        norm = self.normalized
        return (
            np.array([r.x for r in norm], dtype=np.int64),
            np.array([r.y for r in norm], dtype=np.int64),
            np.array([r.x2 for r in norm], dtype=np.int64),
            np.array([r.y2 for r in norm], dtype=np.int64),
        )

    @property
    def area(self):
        return sum(r.area for r in self.normalized)

    def bounds(self):
        """Bounding rectangle of the union, or None when empty."""
        if not self.rects:
            return None
        x0 = min(r.x for r in self.rects)
        y0 = min(r.y for r in self.rects)
        x1 = max(r.x2 for r in self.rects)
        y1 = max(r.y2 for r in self.rects)
        return Rect(x0, y0, x1 - x0, y1 - y0)

    def covered_area(self, xs, ys, ws, hs):
        """Vectorised area of each query rectangle that lies inside the union."""
        xs, ys, ws, hs = (np.asarray(a, dtype=np.int64) for a in (xs, ys, ws, hs))
        total = np.zeros(np.broadcast(xs, ys, ws, hs).shape, dtype=np.int64)
        ex0, ey0, ex1, ey1 = self._edges
        for rx0, ry0, rx1, ry1 in zip(ex0, ey0, ex1, ey1):
            ix = np.minimum(xs + ws, rx1) - np.maximum(xs, rx0)
            iy = np.minimum(ys + hs, ry1) - np.maximum(ys, ry0)
            total += np.where((ix > 0) & (iy > 0), ix * iy, 0)
        return total

    def covers_many(self, xs, ys, ws, hs):
        xs, ys, ws, hs = (np.asarray(a, dtype=np.int64) for a in (xs, ys, ws, hs))
        return self.covered_area(xs, ys, ws, hs) == ws * hs

    def contains_points(self, px, py):
        px = np.asarray(px, dtype=np.int64)
        py = np.asarray(py, dtype=np.int64)
        inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
        ex0, ey0, ex1, ey1 = self._edges
        for rx0, ry0, rx1, ry1 in zip(ex0, ey0, ex1, ey1):
            inside |= (px >= rx0) & (px < rx1) & (py >= ry0) & (py < ry1)
        return inside


def covers(screen_map, query):
    """True iff every pixel of ``query`` lies inside the screened union."""
    return bool(screen_map.covers_many(query.x, query.y, query.w, query.h))


def patch_rect(cx, cy, patch_size):
    half = patch_size // 2
    return Rect(cx - half, cy - half, patch_size, patch_size)


def eligible_seeds(screen_map, annotations, patch_size):
    """Annotations whose centred patch lies entirely inside the screened union."""
    if patch_size <= 0 or patch_size % 2:
        raise ValueError(f"patch_size must be even and positive, got {patch_size}")
    annotations = list(annotations)
    if not annotations:
        return []
    half = patch_size // 2
    cx = np.fromiter((a.cx for a in annotations), dtype=np.int64, count=len(annotations))
    cy = np.fromiter((a.cy for a in annotations), dtype=np.int64, count=len(annotations))
    ok = screen_map.covers_many(cx - half, cy - half, patch_size, patch_size)
    return [a for a, keep in zip(annotations, ok) if keep]


def tile_sub_images(screen_map, patch_size):
    """Fixed, non-overlapping patch_size tiles fully inside the screened union.

    Each rectangle of the normalized decomposition anchors its own grid at
    its top-left corner; a grid tile may extend into neighbouring parts of the
    union.  Tiles are accepted greedily in decomposition order and rejected if
    they overlap an already accepted tile.  Output is sorted by (y, x).
    """
    if patch_size <= 0:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    accepted = []
    buckets = {}

    def collides(x, y):
        bx, by = x // patch_size, y // patch_size
        for gx in (bx - 1, bx, bx + 1):
            for gy in (by - 1, by, by + 1):
                for ox, oy in buckets.get((gx, gy), ()):
                    if abs(ox - x) < patch_size and abs(oy - y) < patch_size:
                        return True
        return False

    for anchor in screen_map.normalized:
        xs = np.arange(anchor.x, anchor.x2, patch_size, dtype=np.int64)
        ys = np.arange(anchor.y, anchor.y2, patch_size, dtype=np.int64)
        gx, gy = np.meshgrid(xs, ys)
        gx, gy = gx.ravel(), gy.ravel()
        ok = screen_map.covers_many(gx, gy, patch_size, patch_size)
        for x, y in zip(gx[ok].tolist(), gy[ok].tolist()):
            if collides(x, y):
                continue
            accepted.append((y, x))
            buckets.setdefault((x // patch_size, y // patch_size), []).append((x, y))
    return [Rect(x, y, patch_size, patch_size) for y, x in sorted(accepted)]
