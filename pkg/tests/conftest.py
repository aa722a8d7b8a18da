import numpy as np
import pytest

from slidesampler.geometry import Rect, ScreenMap
from slidesampler.model import Annotation, DatasetManifest, SlideManifest
from slidesampler.synth import synthetic_dataset


def raster_mask(rects, width, height):
    """Pixel mask of a rectangle union, the brute-force reference for coverage."""
    mask = np.zeros((height, width), dtype=bool)
    for r in rects:
        mask[max(r.y, 0):r.y2, max(r.x, 0):r.x2] = True
    return mask


def mask_covers(mask, rect):
    h, w = mask.shape
    if rect.x < 0 or rect.y < 0 or rect.x2 > w or rect.y2 > h:
        return False
    return bool(mask[rect.y:rect.y2, rect.x:rect.x2].all())


def random_slide(rng, slide_id, first_id=1, size=2048, n_rects=3, n_cells=200, n_classes=5, role="train"):
    """A slide with a random screened union and cells placed inside it."""
    rects = []
    for _ in range(n_rects):
        w = int(rng.integers(size // 8, size // 2))
        h = int(rng.integers(size // 8, size // 2))
        rects.append(Rect(int(rng.integers(0, size - w)), int(rng.integers(0, size - h)), w, h))
    screen = ScreenMap(slide_id, rects)
    anns = []
    while len(anns) < n_cells:
        r = rects[int(rng.integers(len(rects)))]
        cx = int(rng.integers(r.x, r.x2))
        cy = int(rng.integers(r.y, r.y2))
        cls = len(anns) % n_classes if len(anns) < n_classes else int(rng.integers(n_classes))
        anns.append(Annotation(first_id + len(anns), slide_id, cx, cy, 10, cls, "expert"))
    return SlideManifest(slide_id, size, size, screen, anns, None, role)


def random_manifest(seed, n_slides=2, patch_size=128, **kw):
    rng = np.random.default_rng(seed)
    slides = []
    next_id = 1
    for k in range(n_slides):
        s = random_slide(rng, f"s{k}", first_id=next_id, **kw)
        next_id += len(s.annotations)
        slides.append(s)
    return DatasetManifest(slides=slides, patch_size=patch_size, seed=seed)


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    return synthetic_dataset(out, total=5000, seed=0, patch_size=256)


@pytest.fixture(scope="session")
def synthetic_small(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic_small")
    return synthetic_dataset(out, total=1200, seed=3, patch_size=256)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
