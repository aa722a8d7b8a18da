"""Detection scoring with VOC2007 11-point average precision."""

import json
import statistics
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .nms import iou, nms  # noqa: F401  (re-exported)


@dataclass(frozen=True)
class Detection:
    id: int
    image_id: str
    cls: int
    score: float
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"detection {self.id} has non-positive size")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection {self.id} score {self.score} outside [0, 1]")

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)

    @property
    def center(self):
        return (self.x + self.w / 2, self.y + self.h / 2)


@dataclass(frozen=True)
class GroundTruth:
    id: int
    image_id: str
    cls: int
    x: float
    y: float
    w: float
    h: float

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


@dataclass
class ClassResult:
    ap: float = None
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_gt: int = 0
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)

    @property
    def present(self):
        return self.n_gt > 0


@dataclass
class EvalReport:
    per_class: dict
    iou_threshold: float
    matches: list = field(default_factory=list)
    class_names: tuple = ()

    @property
    def aps(self):
        return {k: r.ap for k, r in self.per_class.items()}

    @property
    def map(self):
        return map_score(self.aps.values())

    def recall(self, cls):
        r = self.per_class[cls]
        return r.tp / r.n_gt if r.n_gt else None

    def to_dict(self):
        name = (lambda k: self.class_names[k]) if self.class_names else str
        return {
            "iou_threshold": self.iou_threshold,
            "map": self.map,
            "classes": {
                name(k): {"ap": r.ap, "tp": r.tp, "fp": r.fp, "fn": r.fn, "n_gt": r.n_gt}
                for k, r in sorted(self.per_class.items())
            },
            "matches": [[d, g] for d, g in self.matches],
        }


def eleven_point_ap(tp_flags, n_gt):
    """11-point interpolated AP from per-detection TP flags in score order."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(tp_flags)
    ranks = np.arange(1, len(tp_flags) + 1)
    precision = tp / ranks
    total = 0.0
    for k in range(11):
        # recall >= k/10 in exact integer arithmetic
        ok = tp * 10 >= k * n_gt
        total += float(precision[ok].max()) if ok.any() else 0.0
    return total / 11


def _score_order(dets):
    return sorted(dets, key=lambda d: (-d.score, d.id))


def match_class(dets, gts, iou_threshold=0.5):
    """Greedy matching for one class.

    Detections are visited by descending score (ties by ascending id).  Each
    takes the unmatched ground truth in the same image with the highest IoU
    (ties by ascending id) and counts as a true positive if that IoU reaches
    the threshold.  Returns the TP flag per visited detection and the matches.
    """
    by_image = defaultdict(list)
    for g in sorted(gts, key=lambda g: g.id):
        by_image[g.image_id].append(g)
    arrays = {}
    for image_id, items in by_image.items():
        b = np.array([g.box for g in items], dtype=np.float64)
        arrays[image_id] = (items, b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3],
                            np.zeros(len(items), dtype=bool))
    flags, matches = [], []
    for d in _score_order(dets):
        entry = arrays.get(d.image_id)
        if entry is None:
            flags.append(False)
            continue
        items, x0, y0, x1, y1, used = entry
        iw = np.minimum(x1, d.x + d.w) - np.maximum(x0, d.x)
        ih = np.minimum(y1, d.y + d.h) - np.maximum(y0, d.y)
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        overlap = inter / ((x1 - x0) * (y1 - y0) + d.w * d.h - inter)
        overlap[used] = -1.0
        best = int(np.argmax(overlap))
        if overlap[best] >= iou_threshold:
            used[best] = True
            flags.append(True)
            matches.append((d.id, items[best].id))
        else:
            flags.append(False)
    return flags, matches


def match_and_ap(dets, ground_truth, iou_threshold=0.5, class_names=()):
    """Per-class VOC2007 AP.  Classes without ground truth get ``ap=None``."""
    dets_by_cls = defaultdict(list)
    gts_by_cls = defaultdict(list)
    for d in dets:
        dets_by_cls[d.cls].append(d)
    for g in ground_truth:
        gts_by_cls[g.cls].append(g)
    per_class = {}
    all_matches = []
    for cls in sorted(set(dets_by_cls) | set(gts_by_cls)):
        cd, cg = dets_by_cls.get(cls, []), gts_by_cls.get(cls, [])
        flags, matches = match_class(cd, cg, iou_threshold)
        tp = sum(flags)
        res = ClassResult(tp=tp, fp=len(flags) - tp, fn=len(cg) - tp, n_gt=len(cg))
        if cg:
            res.ap = eleven_point_ap(flags, len(cg))
            cum = np.cumsum(flags)
            res.precision = (cum / np.arange(1, len(flags) + 1)).tolist()
            res.recall = (cum / len(cg)).tolist()
        per_class[cls] = res
        all_matches.extend(matches)
    return EvalReport(per_class, iou_threshold, all_matches, tuple(class_names))


def map_score(aps):
    """Unweighted mean over classes that have ground truth (``None`` skipped)."""
    values = [a for a in aps if a is not None]
    if not values:
        raise ValueError("no class with ground truth")
    return sum(values) / len(values)


@dataclass
class ConcordanceReport:
    per_rater: list
    mean: float
    min: float
    max: float
    std: float


def concordance(reference, raters, iou_threshold=0.5):
    """mAP of each rater's marks against the reference, plus summary stats.

    Rater marks are Detection-like objects or GroundTruth; they are scored as
    detections of confidence 1.0, so ties resolve by id.
    """
    if not raters:
        raise ValueError("at least one rater is required")
    scores = []
    for marks in raters:
        dets = [
            m if isinstance(m, Detection) and m.score == 1.0
            else Detection(m.id, m.image_id, m.cls, 1.0, m.x, m.y, m.w, m.h)
            for m in marks
        ]
        scores.append(match_and_ap(dets, reference, iou_threshold).map)
    return ConcordanceReport(scores, statistics.fmean(scores), min(scores), max(scores), statistics.pstdev(scores))


def ground_truth_from_slides(slides):
    return [
        GroundTruth(a.id, s.slide_id, a.cls, *a.box) for s in slides for a in s.annotations
    ]


def restrict_to_screened(dets, slides):
    """Drop detections whose centre falls outside the screened area of their slide."""
    maps = {s.slide_id: s.screen_map for s in slides}
    out = []
    for d in dets:
        sm = maps.get(d.image_id)
        cx, cy = d.center
        if sm is None or sm.contains_points(int(np.floor(cx)), int(np.floor(cy))):
            out.append(d)
    return out


def detection_to_record(d, class_names):
    return {"id": d.id, "image_id": d.image_id, "class": class_names[d.cls], "score": d.score,
            "bbox": [d.x, d.y, d.w, d.h]}


def _class_id(label, class_names):
    if isinstance(label, int):
        return label
    return list(class_names).index(label)


def detections_from_records(records, class_names):
    return [
        Detection(r["id"], str(r["image_id"]), _class_id(r["class"], class_names), float(r["score"]),
                  *map(float, r["bbox"]))
        for r in records
    ]


def ground_truth_from_records(records, class_names):
    return [
        GroundTruth(r["id"], str(r["image_id"]), _class_id(r["class"], class_names), *map(float, r["bbox"]))
        for r in records
    ]


def write_detections(dets, class_names, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([detection_to_record(d, class_names) for d in dets], fh, indent=1)
        fh.write("\n")
