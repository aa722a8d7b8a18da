"""Greedy non-maximum suppression for dense cell detections.

Candidate pairs come from a spatial index instead of all pairs.  A pair can
only reach IoU ``t`` when both top-left corners lie within ``(1 - t) * s``
of each other on each axis (``s`` the larger box side), so for boxes of
similar size the corners are bucketed into rows and swept along x.  Mixed
sizes fall back to a uniform overlap grid (cell size = median box side).
The greedy pass then walks detections by descending score, ties broken by
ascending id, exactly as the quadratic algorithm does, so the kept set is
identical.
"""

import numpy as np

BRUTE_FORCE_BELOW = 64


def iou(a, b):
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _pair_iou(x0, y0, x1, y1, i, j):
    iw = np.minimum(x1[i], x1[j]) - np.maximum(x0[i], x0[j])
    ih = np.minimum(y1[i], y1[j]) - np.maximum(y0[i], y0[j])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_i = (x1[i] - x0[i]) * (y1[i] - y0[i])
    area_j = (x1[j] - x0[j]) * (y1[j] - y0[j])
    return inter / (area_i + area_j - inter)


def _grid_pairs(x0, y0, x1, y1, group):
    """All index pairs (i < j) whose boxes share a grid cell and group."""
    n = len(x0)
    sides = np.maximum(x1 - x0, y1 - y0)
    cell = float(np.median(sides))
    for _ in range(2):
        gx0 = np.floor(x0 / cell).astype(np.int64)
        gy0 = np.floor(y0 / cell).astype(np.int64)
        nx = np.floor(x1 / cell).astype(np.int64) - gx0 + 1
        ny = np.floor(y1 / cell).astype(np.int64) - gy0 + 1
        per_box = nx * ny
        # a few huge boxes would flood the grid; coarsen to the largest side
        if per_box.sum() <= 16 * n:
            break
        cell = float(sides.max())
    return _expand(gx0, gy0, nx, ny, per_box, group)


def _expand(gx0, gy0, nx, ny, per_box, group):
    n = len(gx0)
    box = np.repeat(np.arange(n), per_box)
    starts = np.repeat(np.cumsum(per_box) - per_box, per_box)
    k = np.arange(len(box)) - starts
    cx = gx0[box] + k % nx[box]
    cy = gy0[box] + k // nx[box]
    order = np.lexsort((box, cy, cx, group[box]))
    box, cx, cy, grp = box[order], cx[order], cy[order], group[box][order]
    new_group = np.ones(len(box), dtype=bool)
    new_group[1:] = (cx[1:] != cx[:-1]) | (cy[1:] != cy[:-1]) | (grp[1:] != grp[:-1])
    gstart = np.flatnonzero(new_group)
    gsize = np.diff(np.append(gstart, len(box)))
    pos = np.arange(len(box))
    gend = np.repeat(gstart + gsize, gsize)
    after = gend - pos - 1
    total = int(after.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    src = np.repeat(pos, after)
    first = np.repeat(np.cumsum(after) - after, after)
    dst = src + 1 + (np.arange(total) - first)
    a, b = box[src], box[dst]
    i, j = np.minimum(a, b), np.maximum(a, b)
    key = np.unique(i * np.int64(n) + j)
    return key // n, key % n


def _corner_pairs(x0, y0, group, reach):
    """Pairs (i < j) in the same group with ``|dx0| <= reach`` and ``|dy0| <= reach``.

    Corners are bucketed into rows ``reach / 2`` high, so a partner sits in
    the same row or one of the next two; inside a row the x-range is found
    by binary search on one sorted key (bucket-major, x0-minor).
    """
    n = len(x0)
    row = np.floor((y0 - y0.min()) / (reach / 2)).astype(np.int64)
    stride = int(row.max()) + 3
    packed = group.astype(np.int64) * stride + row
    buckets, bucket = np.unique(packed, return_inverse=True)
    order = np.lexsort((x0, packed))
    xs = x0 - x0.min()
    span = float(xs.max()) + 2 * reach + 1.0
    keys = bucket[order] * span + xs[order]
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    src_parts, dst_parts = [], []
    for dy in (0, 1, 2):
        if dy == 0:
            target = bucket
            lo = pos + 1
        else:
            want = packed + dy
            at = np.minimum(np.searchsorted(buckets, want), len(buckets) - 1)
            target = np.where(buckets[at] == want, at, -1)
            lo = np.searchsorted(keys, target * span + (xs - reach), "left")
        hi = np.searchsorted(keys, target * span + (xs + reach), "right")
        count = np.where(target >= 0, np.maximum(hi - lo, 0), 0)
        total = int(count.sum())
        if total == 0:
            continue
        first = np.repeat(np.cumsum(count) - count, count)
        src_parts.append(np.repeat(np.arange(n), count))
        dst_parts.append(order[np.repeat(lo, count) + (np.arange(total) - first)])
    if not src_parts:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    a, b = np.concatenate(src_parts), np.concatenate(dst_parts)
    return np.minimum(a, b), np.maximum(a, b)


def nms_indices(boxes, scores, ids=None, classes=None, iou_threshold=0.5, inclusive=False, method="auto"):
    """Indices of kept boxes, ordered by descending score.

    ``boxes`` is an ``(n, 4)`` array of ``(x, y, w, h)``.  A box is suppressed
    when its IoU with an already kept box of the same class (all boxes when
    ``classes`` is None) exceeds the threshold, or reaches it when
    ``inclusive`` is set.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    group = np.zeros(n, dtype=np.int64) if classes is None else np.asarray(classes, dtype=np.int64)
    rank = np.lexsort((ids, -scores))
    b = boxes[rank]
    x0, y0 = b[:, 0], b[:, 1]
    x1, y1 = x0 + b[:, 2], y0 + b[:, 3]
    g = group[rank]
    if method == "brute" or (method == "auto" and n < BRUTE_FORCE_BELOW):
        i, j = np.triu_indices(n, k=1)
        same = g[i] == g[j]
        i, j = i[same], j[same]
    else:
        sides = np.maximum(b[:, 2], b[:, 3])
        if sides.max() <= 4 * np.median(sides) and iou_threshold > 0:
            # margin keeps float rounding from dropping a boundary pair
            reach = (1 - iou_threshold) * float(sides.max()) * (1 + 1e-9) + 1e-9 * float(sides.max())
            i, j = _corner_pairs(x0, y0, g, max(reach, 1e-6 * float(sides.max())))
        else:
            i, j = _grid_pairs(x0, y0, x1, y1, g)
    overlap = _pair_iou(x0, y0, x1, y1, i, j)
    hit = overlap >= iou_threshold if inclusive else overlap > iou_threshold
    src, dst = i[hit], j[hit]
    order = np.argsort(src, kind="stable")
    src, dst = src[order], dst[order]
    bounds = np.searchsorted(src, np.arange(n + 1))
    suppressed = np.zeros(n, dtype=bool)
    dst_list = dst.tolist()
    for node in np.unique(src).tolist():
        if not suppressed[node]:
            suppressed[dst_list[bounds[node]:bounds[node + 1]]] = True
    return rank[~suppressed]


def nms(dets, iou_threshold=0.5, class_aware=True, inclusive=False, method="auto"):
    """Greedy NMS over Detection objects; output sorted by score descending."""
    dets = list(dets)
    if not dets:
        return []
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets])
    ids = np.array([d.id for d in dets])
    classes = np.array([d.cls for d in dets]) if class_aware else None
    keep = nms_indices(boxes, scores, ids, classes, iou_threshold, inclusive, method)
    return [dets[k] for k in keep]
