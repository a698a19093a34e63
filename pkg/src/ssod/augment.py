"""Weak/strong augmentation pipelines with exact box bookkeeping.

Weak view: Mosaic only.  Strong view: the same Mosaic followed by flip,
multi-scale, HSV jitter, grayscale, Gaussian blur and three cutout patterns.
Only flip and multi-scale move boxes; both are axis-aligned affine maps and are
returned as a :class:`GeomTransform` so teacher boxes predicted on the weak
view can be carried onto the strong view.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .geometry import Box

MIN_BOX_AREA = 4.0
FILL_VALUE = 0.5


@dataclass
class LabeledImage:
    pixels: np.ndarray              # [H, W, 3] in [0, 1]
    labels: list = field(default_factory=list)   # (class_id, Box)
    provenance: tuple = ()

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def clip_labels(labels, width: float, height: float, min_area: float = MIN_BOX_AREA,
                region: tuple[float, float, float, float] | None = None) -> list:
    """Clip corner-form extents to the image (or ``region``) and drop slivers."""
    rx1, ry1, rx2, ry2 = region if region is not None else (0.0, 0.0, width, height)
    out = []
    for c, box in labels:
        x1, y1, x2, y2 = box.to_xyxy()
        x1, x2 = max(x1, rx1), min(x2, rx2)
        y1, y2 = max(y1, ry1), min(y2, ry2)
        if x2 - x1 <= 0 or y2 - y1 <= 0 or (x2 - x1) * (y2 - y1) < min_area:
            continue
        out.append((c, Box.from_xyxy(x1, y1, x2, y2)))
    return out


# geometric -----------------------------------------------------------------


@dataclass(frozen=True)
class GeomTransform:
    """Per-axis affine map ``x' = sx * x + tx``, ``y' = sy * y + ty`` in pixel coordinates."""

    sx: float = 1.0
    tx: float = 0.0
    sy: float = 1.0
    ty: float = 0.0

    def then(self, other: "GeomTransform") -> "GeomTransform":
        return GeomTransform(other.sx * self.sx, other.sx * self.tx + other.tx,
                             other.sy * self.sy, other.sy * self.ty + other.ty)

    def apply_box(self, box: Box) -> Box:
        return Box(self.sx * box.cx + self.tx, self.sy * box.cy + self.ty,
                   abs(self.sx) * box.w, abs(self.sy) * box.h)

    def apply_labels(self, labels, width: float, height: float, min_area: float = MIN_BOX_AREA) -> list:
        return clip_labels([(c, self.apply_box(b)) for c, b in labels], width, height, min_area)


def mosaic(imgs, out_size: int, rng: np.random.Generator | None = None,
           center: tuple[float, float] | None = None, min_area: float = MIN_BOX_AREA) -> LabeledImage:
    """Tile four images around a center on a 2x canvas, then halve the canvas to ``out_size``.

    Image k is placed so that its inner corner touches the center (top-left,
    top-right, bottom-left, bottom-right in that order) and is cropped by the
    canvas.  The center is uniform over the middle half of the canvas unless
    given explicitly (in canvas coordinates).
    """
    if len(imgs) != 4:
        raise ValueError("mosaic needs exactly 4 images")
    s2 = 2 * out_size
    if center is None:
        xc = int(rng.integers(out_size // 2, s2 - out_size // 2 + 1))
        yc = int(rng.integers(out_size // 2, s2 - out_size // 2 + 1))
    else:
        xc, yc = (int(v) for v in center)
    canvas = np.full((s2, s2, 3), FILL_VALUE)
    labels = []
    prov = []
    for k, im in enumerate(imgs):
        h, w = im.size
        if k == 0:
            x1a, y1a, x2a, y2a = max(xc - w, 0), max(yc - h, 0), xc, yc
            x1b, y1b = w - (x2a - x1a), h - (y2a - y1a)
        elif k == 1:
            x1a, y1a, x2a, y2a = xc, max(yc - h, 0), min(xc + w, s2), yc
            x1b, y1b = 0, h - (y2a - y1a)
        elif k == 2:
            x1a, y1a, x2a, y2a = max(xc - w, 0), yc, xc, min(s2, yc + h)
            x1b, y1b = w - (x2a - x1a), 0
        else:
            x1a, y1a, x2a, y2a = xc, yc, min(xc + w, s2), min(s2, yc + h)
            x1b, y1b = 0, 0
        if x2a > x1a and y2a > y1a:
            canvas[y1a:y2a, x1a:x2a] = im.pixels[y1b:y1b + (y2a - y1a), x1b:x1b + (x2a - x1a)]
        dx, dy = x1a - x1b, y1a - y1b
        moved = [(c, Box(b.cx + dx, b.cy + dy, b.w, b.h)) for c, b in im.labels]
        # the crop region bounds what is visible of this image
        labels += clip_labels(moved, s2, s2, min_area=0.0, region=(x1a, y1a, x2a, y2a))
        prov += list(im.provenance)
    small = canvas.reshape(out_size, 2, out_size, 2, 3).mean(axis=(1, 3))
    half = GeomTransform(0.5, 0.0, 0.5, 0.0)
    return LabeledImage(small, half.apply_labels(labels, out_size, out_size, min_area), tuple(prov))


def hflip(img: LabeledImage) -> tuple[LabeledImage, GeomTransform]:
    h, w = img.size
    t = GeomTransform(-1.0, float(w), 1.0, 0.0)
    return LabeledImage(img.pixels[:, ::-1].copy(), t.apply_labels(img.labels, w, h), img.provenance), t


def rescale(img: LabeledImage, ratio: float) -> tuple[LabeledImage, GeomTransform]:
    """Scale content by ``ratio`` about the image center on a fixed-size canvas (padding with gray)."""
    h, w = img.size
    cx, cy = w / 2, h / 2
    t = GeomTransform(ratio, (1 - ratio) * cx, ratio, (1 - ratio) * cy)
    # output pixel p (center p + 0.5) samples input at (p + 0.5 - t) / ratio - 0.5
    inv = 1.0 / ratio
    offs = [(0.5 - t.ty) * inv - 0.5, (0.5 - t.tx) * inv - 0.5]
    out = np.empty_like(img.pixels)
    for ch in range(img.pixels.shape[2]):
        out[..., ch] = ndimage.affine_transform(img.pixels[..., ch], np.diag([inv, inv]), offset=offs,
                                                order=1, mode="constant", cval=FILL_VALUE)
    return LabeledImage(np.clip(out, 0, 1), t.apply_labels(img.labels, w, h), img.provenance), t


# photometric ---------------------------------------------------------------


def hsv_jitter(pixels: np.ndarray, rng: np.random.Generator, brightness: float = 0.4,
               saturation: float = 0.7, hue: float = 0.015) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(pixels, 0, 1))
    hsv[..., 0] = (hsv[..., 0] + rng.uniform(-hue, hue)) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(1 - saturation, 1 + saturation), 0, 1)
    hsv[..., 2] = np.clip(hsv[..., 2] * rng.uniform(1 - brightness, 1 + brightness), 0, 1)
    return np.clip(hsv_to_rgb(hsv), 0, 1)


def grayscale(pixels: np.ndarray) -> np.ndarray:
    y = pixels @ np.array([0.299, 0.587, 0.114])
    return np.repeat(y[..., None], 3, axis=2)


def gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    return np.clip(ndimage.gaussian_filter(pixels, sigma=(sigma, sigma, 0), mode="nearest"), 0, 1)


def cutout(pixels: np.ndarray, rng: np.random.Generator, scale=(0.05, 0.2), ratio=(0.3, 3.3),
           max_tries: int = 50) -> tuple[np.ndarray, tuple[int, int, int, int] | None]:
    """Erase one rectangle with uniform noise.

    Area fraction is uniform in ``scale`` and aspect ratio log-uniform in
    ``ratio``; draws whose rounded rectangle leaves the image or falls outside
    ``scale`` are redrawn.  Returns the new pixels and (x, y, w, h) or None.
    """
    h, w = pixels.shape[:2]
    area = h * w
    for _ in range(max_tries):
        target = rng.uniform(*scale) * area
        ar = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        eh = int(round(np.sqrt(target * ar)))
        ew = int(round(np.sqrt(target / ar)))
        if not (0 < eh <= h and 0 < ew <= w):
            continue
        if not scale[0] <= eh * ew / area <= scale[1]:
            continue
        y0 = int(rng.integers(0, h - eh + 1))
        x0 = int(rng.integers(0, w - ew + 1))
        out = pixels.copy()
        out[y0:y0 + eh, x0:x0 + ew] = rng.uniform(0, 1, (eh, ew, pixels.shape[2]))
        return out, (x0, y0, ew, eh)
    return pixels, None


CUTOUT_PATTERNS = (
    ((0.05, 0.2), (0.3, 3.3)),
    ((0.02, 0.2), (0.1, 6.0)),
    ((0.02, 0.2), (0.05, 8.0)),
)


@dataclass(frozen=True)
class StrongConfig:
    flip_prob: float = 0.5
    scale_range: tuple = (0.1, 1.9)
    hsv_prob: float = 1.0
    hsv: tuple = (0.4, 0.7, 0.015)   # brightness, saturation, hue
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    cutout_prob: float = 0.7
    cutouts: tuple = CUTOUT_PATTERNS

    def photometric_only(self) -> "StrongConfig":
        return replace(self, flip_prob=0.0, scale_range=(1.0, 1.0))


def strong_from_weak(weak: LabeledImage, rng: np.random.Generator,
                     cfg: StrongConfig = StrongConfig()) -> tuple[LabeledImage, GeomTransform]:
    """Apply every post-Mosaic strong stage; returns the image and its geometric map."""
    img, geo = weak, GeomTransform()
    if rng.uniform() < cfg.flip_prob:
        img, t = hflip(img)
        geo = geo.then(t)
    lo, hi = cfg.scale_range
    r = rng.uniform(lo, hi) if hi > lo else lo
    if r != 1.0:
        img, t = rescale(img, r)
        geo = geo.then(t)
    px = img.pixels
    if rng.uniform() < cfg.hsv_prob:
        px = hsv_jitter(px, rng, *cfg.hsv)
    if rng.uniform() < cfg.gray_prob:
        px = grayscale(px)
    if rng.uniform() < cfg.blur_prob:
        px = gaussian_blur(px, rng.uniform(*cfg.blur_sigma))
    for scale, ratio in cfg.cutouts:
        if rng.uniform() < cfg.cutout_prob:
            px, _ = cutout(px, rng, scale, ratio)
    return LabeledImage(px, img.labels, img.provenance), geo


def pick_partners(pool_size: int, index: int, rng: np.random.Generator) -> list[int]:
    return [index] + [int(i) for i in rng.integers(0, pool_size, 3)]


def weak_pipeline(pool, index: int, rng: np.random.Generator, out_size: int | None = None) -> LabeledImage:
    """Mosaic of ``pool[index]`` with three random partners from the same pool."""
    out_size = out_size or pool[index].size[0]
    return mosaic([pool[i] for i in pick_partners(len(pool), index, rng)], out_size, rng)


def strong_pipeline(pool, index: int, rng: np.random.Generator, cfg: StrongConfig = StrongConfig(),
                    out_size: int | None = None) -> LabeledImage:
    weak = weak_pipeline(pool, index, rng, out_size)
    return strong_from_weak(weak, rng, cfg)[0]


def labeled_config(scale_range=(0.5, 1.5)) -> StrongConfig:
    """Augmentation for labeled images: Mosaic, flip, rescale and HSV jitter only."""
    return StrongConfig(scale_range=tuple(scale_range), gray_prob=0.0, blur_prob=0.0, cutout_prob=0.0)
