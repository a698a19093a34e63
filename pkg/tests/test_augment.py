import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssod import augment as au
from ssod.geometry import Box, iou


def _img(r, size=32, n=None):
    n = int(r.integers(0, 4)) if n is None else n
    labels = []
    for _ in range(n):
        w, h = r.uniform(4, 12, 2)
        cx, cy = r.uniform(w / 2, size - w / 2), r.uniform(h / 2, size - h / 2)
        labels.append((int(r.integers(0, 3)), Box(cx, cy, w, h)))
    return au.LabeledImage(r.uniform(0, 1, (size, size, 3)), labels)


def _boxes_inside(labels, size):
    for _, b in labels:
        x1, y1, x2, y2 = b.to_xyxy()
        assert -1e-9 <= x1 < x2 <= size + 1e-9 and -1e-9 <= y1 < y2 <= size + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_mosaic_labels_stay_inside_and_are_bounded(seed):
    r = np.random.default_rng(seed)
    imgs = [_img(r) for _ in range(4)]
    out = au.mosaic(imgs, 32, r)
    assert out.pixels.shape == (32, 32, 3)
    _boxes_inside(out.labels, 32)
    assert len(out.labels) <= sum(len(i.labels) for i in imgs)


def test_mosaic_center_keeps_all_four_quadrants():
    # center at the canvas middle: every image lands whole in its quadrant
    r = np.random.default_rng(0)
    imgs = [_img(r, n=2) for _ in range(4)]
    out = au.mosaic(imgs, 32, center=(32, 32), min_area=0.0)
    assert len(out.labels) == 8
    shift = [(0, 0), (32, 0), (0, 32), (32, 32)]
    want = [(c, Box((b.cx + dx) / 2, (b.cy + dy) / 2, b.w / 2, b.h / 2))
            for im, (dx, dy) in zip(imgs, shift) for c, b in im.labels]
    for (c, b), (c2, b2) in zip(out.labels, want):
        assert c == c2 and iou(b, b2) == pytest.approx(1.0)
    np.testing.assert_allclose(out.pixels[:16, :16], imgs[0].pixels.reshape(16, 2, 16, 2, 3).mean((1, 3)))


def test_mosaic_inflates_per_image_count():
    r = np.random.default_rng(1)
    pool = [_img(r, n=int(r.integers(1, 4))) for _ in range(20)]
    before = np.mean([len(i.labels) for i in pool])
    after = np.mean([len(au.weak_pipeline(pool, k % 20, np.random.default_rng(k)).labels) for k in range(200)])
    assert after > before


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_flip_is_an_involution(seed):
    im = _img(np.random.default_rng(seed))
    once, t1 = au.hflip(im)
    twice, t2 = au.hflip(once)
    np.testing.assert_array_equal(twice.pixels, im.pixels)
    for (c, a), (c2, b) in zip(im.labels, twice.labels):
        assert c == c2 and iou(a, b) == pytest.approx(1.0)
    g = t1.then(t2)
    assert (g.sx, g.tx, g.sy, g.ty) == (1.0, 0.0, 1.0, 0.0)


def test_rescale_moves_pixels_with_boxes():
    px = np.full((32, 32, 3), 0.5)
    px[8:16, 8:16] = 1.0
    im = au.LabeledImage(px, [(0, Box(12, 12, 8, 8))])
    out, geo = au.rescale(im, 0.5)
    (_, b), = out.labels
    assert (b.cx, b.cy, b.w, b.h) == (14.0, 14.0, 4.0, 4.0)
    x1, y1, x2, y2 = (int(v) for v in b.to_xyxy())
    assert out.pixels[y1 + 1:y2 - 1, x1 + 1:x2 - 1].min() > 0.9
    assert geo.apply_box(Box(12, 12, 8, 8)) == b


def test_geometric_map_matches_strong_labels():
    r = np.random.default_rng(2)
    pool = [_img(r, n=3) for _ in range(6)]
    for k in range(30):
        rng = np.random.default_rng(k)
        weak = au.weak_pipeline(pool, k % 6, rng)
        strong, geo = au.strong_from_weak(weak, rng)
        moved = geo.apply_labels(weak.labels, 32, 32)
        assert len(moved) == len(strong.labels)
        for (c, a), (c2, b) in zip(moved, strong.labels):
            assert c == c2 and iou(a, b) == pytest.approx(1.0)


def test_photometric_ops_keep_range():
    r = np.random.default_rng(3)
    px = r.uniform(0, 1, (16, 16, 3))
    for out in (au.hsv_jitter(px, r), au.grayscale(px), au.gaussian_blur(px, 1.0), au.cutout(px, r)[0]):
        assert out.shape == px.shape and out.min() >= 0 and out.max() <= 1
    g = au.grayscale(px)
    np.testing.assert_allclose(g[..., 0], g[..., 2])


def test_cutout_area_in_range():
    r = np.random.default_rng(4)
    for _ in range(100):
        _, rect = au.cutout(np.zeros((32, 32, 3)), r, (0.05, 0.2), (0.3, 3.3))
        assert rect is not None
        x, y, w, h = rect
        assert 0.05 <= w * h / 1024 <= 0.2 and x + w <= 32 and y + h <= 32


def test_clip_labels_drops_slivers():
    labels = [(0, Box(1, 1, 4, 4)), (1, Box(-5, 10, 4, 4)), (2, Box(31.5, 10, 4, 1.5))]
    out = au.clip_labels(labels, 32, 32, min_area=4.0)
    assert [c for c, _ in out] == [0]
    assert out[0][1].to_xyxy() == (0.0, 0.0, 3.0, 3.0)


def test_labeled_config_is_geometric_plus_hsv():
    cfg = au.labeled_config()
    assert cfg.gray_prob == cfg.blur_prob == cfg.cutout_prob == 0.0
    assert cfg.scale_range == (0.5, 1.5)
    same = au.StrongConfig().photometric_only()
    assert same.flip_prob == 0.0 and same.scale_range == (1.0, 1.0)


def test_mosaic_needs_four():
    with pytest.raises(ValueError):
        au.mosaic([_img(np.random.default_rng(0))] * 3, 32, np.random.default_rng(0))
