import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slidesampler.errors import MissingRaster, OutOfBounds
from slidesampler.geometry import Rect, ScreenMap
from slidesampler.model import Annotation, DatasetManifest, SlideManifest
from slidesampler.raster import (AugmentationSpec, GTBox, Patch, augment, extract_patch, metadata_patch,
                                 scale_intensity, transform_box)
from slidesampler.rng import stream
from slidesampler.sampler import PatchSpec, SamplerConfig, make_sampler
from slidesampler.synth import generate_synthetic_slide

IDENTITY = AugmentationSpec()


def toy_patch(size=64, box=(10, 20, 30, 40), seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    spec = PatchSpec("s", 0, 0, size)
    return Patch(pixels, spec, (GTBox(1, 0, *map(float, box)),))


def test_identity_is_bit_identical():
    p = toy_patch()
    out = augment(p, IDENTITY)
    assert np.array_equal(out.pixels, p.pixels) and out.boxes == p.boxes


def test_flip_h_mirrors_box_and_is_involution():
    p = toy_patch()
    once = augment(p, AugmentationSpec(flip_h=True))
    b = once.boxes[0]
    assert (b.x, b.y, b.w, b.h) == (64 - 10 - 30, 20, 30, 40)
    assert np.array_equal(once.pixels, p.pixels[:, ::-1])
    twice = augment(once, AugmentationSpec(flip_h=True))
    assert np.array_equal(twice.pixels, p.pixels) and twice.boxes == p.boxes


def test_flip_v_involution():
    p = toy_patch()
    twice = augment(augment(p, AugmentationSpec(flip_v=True)), AugmentationSpec(flip_v=True))
    assert np.array_equal(twice.pixels, p.pixels) and twice.boxes == p.boxes


def test_rotation_90_analytic_box():
    box = GTBox(1, 0, 10.0, 20.0, 30.0, 40.0)
    out = transform_box(box, 1024, AugmentationSpec(rotation_deg=90))
    assert (out.x, out.y, out.w, out.h) == (20.0, 984.0, 40.0, 30.0)


def test_rotation_90_matches_pixel_oracle():
    size = 64
    pixels = np.zeros((size, size, 3), dtype=np.uint8)
    pixels[20:60, 10:40] = 200
    p = Patch(pixels, PatchSpec("s", 0, 0, size), (GTBox(1, 0, 10.0, 20.0, 30.0, 40.0),))
    out = augment(p, AugmentationSpec(rotation_deg=90))
    # rotate the marked pixels one by one: (col, row) -> (row, size - 1 - col)
    expected = np.zeros_like(pixels)
    for row in range(size):
        for col in range(size):
            expected[size - 1 - col, row] = pixels[row, col]
    assert np.array_equal(out.pixels, expected)
    ys, xs = np.nonzero(out.pixels[:, :, 0])
    b = out.boxes[0]
    assert (b.x, b.y, b.x + b.w, b.y + b.h) == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_rotation_45_hull():
    box = GTBox(1, 0, 22.0, 22.0, 20.0, 20.0)
    out = transform_box(box, 64, AugmentationSpec(rotation_deg=45))
    half_diag = 10 * math.sqrt(2)
    assert out.x == pytest.approx(32 - half_diag)
    assert out.w == pytest.approx(2 * half_diag)


def test_intensity_clamps():
    px = np.array([[[0, 100, 250]]], dtype=np.uint8)
    assert scale_intensity(px, 1.2).tolist() == [[[0, 120, 255]]]
    assert scale_intensity(px, 0.8).tolist() == [[[0, 80, 200]]]
    # round half up: 5 * 1.1 = 5.5 -> 6
    assert scale_intensity(np.array([[[5]]], dtype=np.uint8), 1.1).tolist() == [[[6]]]


@settings(max_examples=100, deadline=None)
@given(st.floats(0.8, 1.2), st.integers(0, 255), st.integers(0, 255))
def test_intensity_monotone(scale, a, b):
    lo, hi = sorted((a, b))
    out = scale_intensity(np.array([lo, hi], dtype=np.uint8), scale)
    assert out[0] <= out[1]
    assert 0 <= out[0] and out[1] <= 255


def test_augmentation_spec_ranges():
    with pytest.raises(ValueError):
        AugmentationSpec(rotation_deg=91)
    with pytest.raises(ValueError):
        AugmentationSpec(intensity_scale=1.3)
    specs = [AugmentationSpec.sample(stream(0, i)) for i in range(2000)]
    assert all(0 <= s.rotation_deg <= 90 and 0.8 <= s.intensity_scale <= 1.2 for s in specs)
    assert abs(np.mean([s.flip_h for s in specs]) - 0.5) < 0.05


@pytest.fixture(scope="module")
def slide_and_image():
    image, slide = generate_synthetic_slide(600, 500, [(0, 0, 600, 500)], (3, 4, 5, 6, 7), seed=2)
    return image, slide


def test_extract_patch_matches_scan(slide_and_image):
    image, slide = slide_and_image
    spec = PatchSpec(slide.slide_id, 100, 50, 256)
    patch = extract_patch(slide, spec, image=image)
    assert patch.pixels.shape == (256, 256, 3)
    assert np.array_equal(patch.pixels, image[50:306, 100:356])
    expected = sorted(a.id for a in slide.annotations if spec.rect.contains_point(a.cx, a.cy))
    assert sorted(b.annotation_id for b in patch.boxes) == expected


def test_extract_patch_errors(slide_and_image):
    image, slide = slide_and_image
    with pytest.raises(OutOfBounds):
        extract_patch(slide, PatchSpec(slide.slide_id, 400, 400, 256), image=image)
    with pytest.raises(MissingRaster):
        extract_patch(slide, PatchSpec(slide.slide_id, 0, 0, 256))
    assert metadata_patch(slide, PatchSpec(slide.slide_id, 0, 0, 256)).pixels is None


def test_extract_live_patch_contains_seed(synthetic_small):
    cfg = SamplerConfig.from_manifest(synthetic_small, batch_size=8)
    batch = make_sampler(synthetic_small, cfg).batch(0, 0)
    for spec in batch.patches:
        slide = synthetic_small.slide(spec.slide_id)
        patch = extract_patch(slide, spec, manifest=synthetic_small)
        assert patch.pixels.shape == (256, 256, 3)
        assert spec.seed_annotation_id in {b.annotation_id for b in patch.boxes}


def test_rotation_keeps_interior_boxes_and_audits_border(synthetic_small):
    slide = synthetic_small.slide("slide2")
    spec = PatchSpec(slide.slide_id, 200, 200, 256)
    patch = extract_patch(slide, spec, with_context=True, manifest=synthetic_small)
    assert patch.context.shape == (256 + 2 * patch.context_margin,) * 2 + (3,)
    half = 128
    for deg in (10.0, 33.0, 45.0, 77.0, 90.0):
        out = augment(patch, AugmentationSpec(rotation_deg=deg))
        kept = {b.annotation_id for b in out.boxes}
        dropped = {d["annotation_id"] for d in out.audit}
        for b in patch.boxes:
            cx, cy = b.x + b.w / 2, b.y + b.h / 2
            reach = math.hypot(cx - half, cy - half) + math.hypot(b.w, b.h) / 2
            if reach <= half:
                assert b.annotation_id in kept
            assert b.annotation_id in kept or b.annotation_id in dropped
        for b in out.boxes:
            assert 0 <= b.x and b.x + b.w <= 256 and 0 <= b.y and b.y + b.h <= 256


def test_arbitrary_rotation_uses_context_pixels(synthetic_small):
    slide = synthetic_small.slide("slide1")
    spec = PatchSpec(slide.slide_id, 300, 300, 128)
    patch = extract_patch(slide, spec, with_context=True, manifest=synthetic_small)
    out = augment(patch, AugmentationSpec(rotation_deg=30.0))
    assert out.pixels.shape == (128, 128, 3) and out.pixels.dtype == np.uint8
    # the centre pixel is a fixed point of the rotation
    assert np.abs(out.pixels[64, 64].astype(int) - patch.pixels[64, 64].astype(int)).max() <= 2
