"""Domain types and the JSON dataset manifest."""

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EmptySelection, ParseError, ValidationError
from .geometry import Rect, ScreenMap

CANONICAL_CLASSES = ("eosinophil", "mast_cell", "neutrophil", "macrophage", "lymphocyte")
EOSINOPHIL, MAST_CELL, NEUTROPHIL, MACROPHAGE, LYMPHOCYTE = range(5)

SPLIT_ROLES = ("train", "val", "test")
DEFAULT_RADIUS = 25
DEFAULT_PATCH_SIZE = 1024
DEFAULT_EPOCH_LENGTH = 500


class ClassRegistry:
    """Stable integer ids for cell classes.

    The five canonical classes always hold ids 0-4; extra labels are appended
    in registration order.
    """

    def __init__(self, extra=()):
        self._names = list(CANONICAL_CLASSES)
        for name in extra:
            self.register(name)

    def register(self, name):
        name = str(name)
        if name not in self._names:
            self._names.append(name)
        return self._names.index(name)

    def id_of(self, label):
        if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
            if 0 <= label < len(self._names):
                return int(label)
            raise KeyError(f"unknown class id {label}")
        try:
            return self._names.index(label)
        except ValueError:
            raise KeyError(f"unknown class {label!r}") from None

    def name_of(self, cls_id):
        return self._names[cls_id]

    @property
    def names(self):
        return tuple(self._names)

    @property
    def extra(self):
        return tuple(self._names[len(CANONICAL_CLASSES):])

    def __len__(self):
        return len(self._names)

    def __eq__(self, other):
        return isinstance(other, ClassRegistry) and self._names == other._names


@dataclass(frozen=True)
class Annotation:
    id: int
    slide_id: str
    cx: int
    cy: int
    r: int
    cls: int
    annotator: str = ""

    @property
    def box(self):
        """Axis-aligned square of side 2r centred on the cell."""
        return (self.cx - self.r, self.cy - self.r, 2 * self.r, 2 * self.r)


@dataclass(frozen=True)
class SlideManifest:
    slide_id: str
    width: int
    height: int
    screen_map: ScreenMap
    annotations: tuple = ()
    raster_source: str = None
    split_role: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))

    @cached_property
    def arrays(self):
        """Annotation columns as numpy arrays, sorted by cx for range queries."""
        anns = self.annotations
        n = len(anns)
        cx = np.fromiter((a.cx for a in anns), dtype=np.int64, count=n)
        order = np.argsort(cx, kind="stable")
        cols = {
            "index": order,
            "id": np.fromiter((a.id for a in anns), dtype=np.int64, count=n)[order],
            "cx": cx[order],
            "cy": np.fromiter((a.cy for a in anns), dtype=np.int64, count=n)[order],
            "r": np.fromiter((a.r for a in anns), dtype=np.int64, count=n)[order],
            "cls": np.fromiter((a.cls for a in anns), dtype=np.int64, count=n)[order],
        }
        return cols

    def annotations_in(self, rect):
        """Annotations whose centre lies inside ``rect``, in manifest order."""
        cols = self.arrays
        lo = np.searchsorted(cols["cx"], rect.x, side="left")
        hi = np.searchsorted(cols["cx"], rect.x2, side="left")
        cy = cols["cy"][lo:hi]
        hit = (cy >= rect.y) & (cy < rect.y2)
        idx = np.sort(cols["index"][lo:hi][hit])
        return [self.annotations[i] for i in idx]


@dataclass(frozen=True)
class DatasetManifest:
    slides: tuple
    patch_size: int = DEFAULT_PATCH_SIZE
    seed: int = 0
    epoch_length: int = DEFAULT_EPOCH_LENGTH
    default_radius: int = DEFAULT_RADIUS
    classes: ClassRegistry = field(default_factory=ClassRegistry)
    # directory that relative raster_source paths resolve against; not serialized
    base_dir: str = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "slides", tuple(self.slides))

    def raster_path(self, slide):
        if slide.raster_source is None:
            return None
        path = Path(slide.raster_source)
        if not path.is_absolute() and self.base_dir is not None:
            path = Path(self.base_dir) / path
        return path

    def slide(self, slide_id):
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)

    def by_role(self, *roles):
        return [s for s in self.slides if s.split_role in roles]

    @property
    def n_annotations(self):
        return sum(len(s.annotations) for s in self.slides)

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class ClassFrequencyTable:
    counts: tuple
    names: tuple

    @property
    def total(self):
        return sum(self.counts)

    @property
    def frequencies(self):
        total = self.total
        return np.array([c / total for c in self.counts], dtype=np.float64)

    def as_dict(self):
        return dict(zip(self.names, self.counts))


def class_frequencies(manifest, roles=("train",)):
    """Exact per-class annotation tallies over slides in the given roles."""
    roles = set(roles)
    counter = Counter()
    for slide in manifest.slides:
        if slide.split_role in roles:
            counter.update(a.cls for a in slide.annotations)
    if not counter:
        raise EmptySelection(f"no annotations in roles {sorted(roles)}")
    counts = tuple(counter.get(k, 0) for k in range(len(manifest.classes)))
    return ClassFrequencyTable(counts=counts, names=manifest.classes.names)


def validate(manifest, require_cross_validation=False):
    """Check every manifest invariant and raise one ValidationError listing all offenders."""
    problems = []
    if not manifest.slides:
        problems.append("manifest contains no slides")
    if manifest.patch_size <= 0 or manifest.patch_size % 2:
        problems.append(f"patch_size must be even and positive, got {manifest.patch_size}")
    if manifest.epoch_length <= 0:
        problems.append(f"epoch_length must be positive, got {manifest.epoch_length}")
    if manifest.default_radius <= 0:
        problems.append(f"default_radius must be positive, got {manifest.default_radius}")
    seen_slides = set()
    seen_ids = {}
    for slide in manifest.slides:
        sid = slide.slide_id
        if sid in seen_slides:
            problems.append(f"duplicate slide_id {sid!r}")
        seen_slides.add(sid)
        if slide.width <= 0 or slide.height <= 0:
            problems.append(f"slide {sid!r}: dimensions must be positive")
        if slide.split_role not in SPLIT_ROLES:
            problems.append(f"slide {sid!r}: unknown split_role {slide.split_role!r}")
        for rect in slide.screen_map.rects:
            if not rect.within(slide.width, slide.height):
                problems.append(f"slide {sid!r}: screened rect {rect.as_list()} outside slide bounds")
        if not slide.annotations:
            continue
        cols = slide.arrays
        inside = slide.screen_map.contains_points(cols["cx"], cols["cy"])
        in_bounds = (
            (cols["cx"] >= 0) & (cols["cx"] < slide.width)
            & (cols["cy"] >= 0) & (cols["cy"] < slide.height)
        )
        for k in np.flatnonzero(~in_bounds):
            problems.append(f"slide {sid!r}: annotation {cols['id'][k]} centre outside slide bounds")
        for k in np.flatnonzero(in_bounds & ~inside):
            problems.append(f"slide {sid!r}: annotation {cols['id'][k]} outside screened area")
        for k in np.flatnonzero(cols["r"] <= 0):
            problems.append(f"slide {sid!r}: annotation {cols['id'][k]} has non-positive radius")
        for a in slide.annotations:
            if a.id in seen_ids:
                problems.append(f"annotation id {a.id} duplicated (slides {seen_ids[a.id]!r}, {sid!r})")
            else:
                seen_ids[a.id] = sid
            if not 0 <= a.cls < len(manifest.classes):
                problems.append(f"slide {sid!r}: annotation {a.id} has unknown class {a.cls}")
    if require_cross_validation:
        for role in ("val", "test"):
            n = sum(1 for s in manifest.slides if s.split_role == role)
            if n != 1:
                problems.append(f"cross-validation needs exactly one {role} slide, found {n}")
    if problems:
        raise ValidationError(problems)
    return manifest


def _int(value, what):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{what} must be an integer, got {value!r}")
    return value


def manifest_from_dict(data, require_cross_validation=False, base_dir=None):
    if not isinstance(data, dict) or "slides" not in data:
        raise ParseError("manifest must be a JSON object with a 'slides' list")
    try:
        registry = ClassRegistry(data.get("classes", ())[len(CANONICAL_CLASSES):])
        default_radius = _int(data.get("default_radius", DEFAULT_RADIUS), "default_radius")
        slides = []
        for s in data["slides"]:
            sid = str(s["slide_id"])
            rects = []
            for r in s.get("screened", []):
                x, y, w, h = (_int(v, f"slide {sid!r} screened rect") for v in r)
                try:
                    rects.append(Rect(x, y, w, h))
                except ValueError as exc:
                    raise ValidationError([f"slide {sid!r}: {exc}"]) from None
            anns = []
            for a in s.get("annotations", []):
                label = a["class"]
                cls = registry.register(label) if isinstance(label, str) else registry.id_of(label)
                anns.append(
                    Annotation(
                        id=_int(a["id"], "annotation id"),
                        slide_id=sid,
                        cx=_int(a["cx"], "cx"),
                        cy=_int(a["cy"], "cy"),
                        r=_int(a.get("r", default_radius), "r"),
                        cls=cls,
                        annotator=str(a.get("annotator", "")),
                    )
                )
            slides.append(
                SlideManifest(
                    slide_id=sid,
                    width=_int(s["width"], "width"),
                    height=_int(s["height"], "height"),
                    screen_map=ScreenMap(sid, rects),
                    annotations=anns,
                    raster_source=s.get("raster_source"),
                    split_role=s.get("split_role", "train"),
                )
            )
        manifest = DatasetManifest(
            slides=slides,
            patch_size=_int(data.get("patch_size", DEFAULT_PATCH_SIZE), "patch_size"),
            seed=_int(data.get("seed", 0), "seed"),
            epoch_length=_int(data.get("epoch_length", DEFAULT_EPOCH_LENGTH), "epoch_length"),
            default_radius=default_radius,
            classes=registry,
            base_dir=base_dir,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed manifest: {exc!r}") from None
    return validate(manifest, require_cross_validation)


def manifest_to_dict(manifest):
    data = {
        "patch_size": manifest.patch_size,
        "seed": manifest.seed,
        "epoch_length": manifest.epoch_length,
    }
    if manifest.default_radius != DEFAULT_RADIUS:
        data["default_radius"] = manifest.default_radius
    if manifest.classes.extra:
        data["classes"] = list(manifest.classes.names)
    names = manifest.classes.names
    data["slides"] = [
        {
            "slide_id": s.slide_id,
            "width": s.width,
            "height": s.height,
            "split_role": s.split_role,
            "raster_source": s.raster_source,
            "screened": [r.as_list() for r in s.screen_map.rects],
            "annotations": [
                {"id": a.id, "cx": a.cx, "cy": a.cy, "r": a.r, "class": names[a.cls], "annotator": a.annotator}
                for a in s.annotations
            ],
        }
        for s in manifest.slides
    ]
    return data


def dumps_manifest(manifest):
    return json.dumps(manifest_to_dict(manifest), indent=1, ensure_ascii=False) + "\n"


def load_manifest(path, require_cross_validation=False):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return manifest_from_dict(data, require_cross_validation, base_dir=str(path.parent))


def save_manifest(manifest, path):
    Path(path).write_text(dumps_manifest(manifest), encoding="utf-8")
