"""Synthetic shapes detection dataset and COCO-subset annotation I/O.

On-disk layout written by :func:`generate`::

    <root>/dataset.json          generation spec
    <root>/labeled.json          images + annotations of the labeled split
    <root>/unlabeled.json        images only (annotation list empty)
    <root>/unlabeled_gt.json     held-back annotations of the unlabeled split
    <root>/test.json             images + annotations of the evaluation split
    <root>/images/<split>_<id>.png

Annotation files are a strict subset of COCO: ``images`` (id, file_name,
width, height, domain), ``annotations`` (id, image_id, category_id,
bbox = [x, y, w, h] top-left corner form, area, iscrowd) and ``categories``
(id, name).  Category ids are 0-based class indices.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import LabeledImage
from .errors import DataError
from .geometry import Box

CLASSES = ("circle", "square", "triangle")
SPLIT_FILES = {"labeled": "labeled.json", "unlabeled": "unlabeled.json",
               "unlabeled_gt": "unlabeled_gt.json", "test": "test.json"}


@dataclass(frozen=True)
class DatasetSpec:
    num_images: int = 500
    image_size: int = 64
    classes: tuple = CLASSES
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 12
    max_size: int = 30
    labeled_fraction: float = 0.1
    num_test: int = 200
    seed: int = 0
    # background hue offset applied to the unlabeled split (and odd test images)
    domain_shift: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must be in (0, 1]")
        if self.num_images < 10:
            raise ValueError("num_images must be at least 10")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("bad objects-per-image range")
        if not 2 <= self.min_size <= self.max_size < self.image_size:
            raise ValueError("bad object size range")
        if set(self.classes) - set(CLASSES) or len(set(self.classes)) != len(self.classes):
            raise ValueError(f"classes must be distinct names from {CLASSES}")

    @property
    def num_labeled(self) -> int:
        return max(1, int(round(self.num_images * self.labeled_fraction)))


# rendering -------------------------------------------------------------------


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Binary mask of a shape inscribed in a size x size patch, sampled at pixel centers."""
    c = np.arange(size) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if kind == "circle":
        r = size / 2
        m = (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    elif kind == "square":
        m = np.ones((size, size), bool)
    elif kind == "triangle":
        # apex at top center, base along the bottom edge
        half = size / 2
        m = np.abs(xx - half) <= half * (yy / size)
    else:
        raise ValueError(kind)
    return m


def _background(rng: np.random.Generator, size: int, hue: float) -> np.ndarray:
    coarse = rng.uniform(-1, 1, (5, 5))
    idx = np.linspace(0, 4, size)
    i0 = np.floor(idx).astype(int).clip(0, 3)
    f = idx - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    smooth = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    sat = rng.uniform(0.3, 0.6)
    val = rng.uniform(0.3, 0.5)
    base = np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val))
    img = base[None, None, :] * (1 + 0.25 * smooth[..., None])
    img = img + rng.normal(0, 0.03, (size, size, 3))
    return np.clip(img, 0, 1)


def render_image(rng: np.random.Generator, spec: DatasetSpec, shifted: bool) -> tuple[np.ndarray, list]:
    s = spec.image_size
    hue = rng.uniform(0.0, 0.3) + (spec.domain_shift if shifted else 0.0)
    img = _background(rng, s, hue)
    labels: list[tuple[int, Box]] = []
    placed: list[tuple[int, int, int, int]] = []
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n):
        cls_id = int(rng.integers(len(spec.classes)))
        kind = spec.classes[cls_id]
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        mask = shape_mask(kind, size)
        ys, xs = np.nonzero(mask)
        for _try in range(50):
            x0 = int(rng.integers(0, s - size + 1))
            y0 = int(rng.integers(0, s - size + 1))
            bx = (x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1)
            if all(bx[2] + 1 <= p[0] or p[2] + 1 <= bx[0] or bx[3] + 1 <= p[1] or p[3] + 1 <= bx[1]
                   for p in placed):
                break
        else:
            continue
        color = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.75, 1.0)))
        region = img[y0:y0 + size, x0:x0 + size]
        region[mask] = color
        placed.append(bx)
        labels.append((cls_id, Box.from_xyxy(*map(float, bx))))
    return img, labels


# I/O ---------------------------------------------------------------------------


def _coco(split: str, spec: DatasetSpec, records: list[dict], with_annotations: bool) -> dict:
    images, anns = [], []
    for rec in records:
        images.append({"id": rec["id"], "file_name": rec["file_name"], "width": spec.image_size,
                       "height": spec.image_size, "domain": rec["domain"]})
        if not with_annotations:
            continue
        for c, box in rec["labels"]:
            x1, y1, x2, y2 = box.to_xyxy()
            anns.append({"id": len(anns), "image_id": rec["id"], "category_id": c,
                         "bbox": [x1, y1, x2 - x1, y2 - y1], "area": (x2 - x1) * (y2 - y1), "iscrowd": 0})
    return {"info": {"split": split}, "images": images, "annotations": anns,
            "categories": [{"id": i, "name": n} for i, n in enumerate(spec.classes)]}


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def generate(spec: DatasetSpec, out_dir: str | Path) -> Path:
    """Render every split to ``out_dir``; deterministic in ``spec.seed``."""
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {root}: {e}") from e
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(spec.num_images)
    labeled_ids = set(order[:spec.num_labeled].tolist())
    splits: dict[str, list[dict]] = {"labeled": [], "unlabeled": [], "test": []}
    jobs = [("labeled" if i in labeled_ids else "unlabeled", i) for i in range(spec.num_images)]
    jobs += [("test", spec.num_images + i) for i in range(spec.num_test)]
    for split, img_id in jobs:
        shifted = split == "unlabeled" or (split == "test" and img_id % 2 == 1)
        pixels, labels = render_image(rng, spec, shifted)
        name = f"{split}_{img_id:05d}.png"
        Image.fromarray(np.round(pixels * 255).astype(np.uint8)).save(root / "images" / name)
        splits[split].append({"id": img_id, "file_name": name, "labels": labels,
                              "domain": int(shifted)})
    _dump(root / "dataset.json", asdict(spec))
    _dump(root / SPLIT_FILES["labeled"], _coco("labeled", spec, splits["labeled"], True))
    _dump(root / SPLIT_FILES["unlabeled"], _coco("unlabeled", spec, splits["unlabeled"], False))
    _dump(root / SPLIT_FILES["unlabeled_gt"], _coco("unlabeled_gt", spec, splits["unlabeled"], True))
    _dump(root / SPLIT_FILES["test"], _coco("test", spec, splits["test"], True))
    return root


@dataclass
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    labels: list
    domain: int = 0


def load_annotations(path: str | Path, num_classes: int | None = None) -> list[ImageRecord]:
    """Parse and validate a COCO-subset annotation file; boxes come back in center form."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON ({e})") from e
    try:
        cats = {int(c["id"]) for c in doc["categories"]}
        images = doc["images"]
        anns = doc["annotations"]
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: missing top-level field {e}") from e
    if num_classes is not None:
        cats &= set(range(num_classes))
    recs: dict[int, ImageRecord] = {}
    for k, im in enumerate(images):
        try:
            rec = ImageRecord(int(im["id"]), str(im["file_name"]), int(im["width"]), int(im["height"]), [],
                              int(im.get("domain", 0)))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: image record {k} malformed ({e})") from e
        recs[rec.id] = rec
    for k, a in enumerate(anns):
        try:
            img = recs[int(a["image_id"])]
            c = int(a["category_id"])
            x, y, w, h = (float(v) for v in a["bbox"])
        except KeyError as e:
            raise DataError(f"{path}: annotation {k} references unknown field/image {e}") from e
        except (TypeError, ValueError) as e:
            raise DataError(f"{path}: annotation {k} malformed ({e})") from e
        if c not in cats:
            raise DataError(f"{path}: annotation {k} has unknown class id {c}")
        if w <= 0 or h <= 0:
            raise DataError(f"{path}: annotation {k} has nonpositive size {w}x{h}")
        if x < 0 or y < 0 or x + w > img.width or y + h > img.height:
            raise DataError(f"{path}: annotation {k} lies outside image {img.id}")
        img.labels.append((c, Box(x + w / 2, y + h / 2, w, h)))
    return list(recs.values())


def load_pixels(root: str | Path, rec: ImageRecord) -> np.ndarray:
    with Image.open(Path(root) / "images" / rec.file_name) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_split(root: str | Path, split: str, num_classes: int | None = None) -> list[LabeledImage]:
    """Load a split into memory as LabeledImages (the unlabeled split carries no labels)."""
    recs = load_annotations(Path(root) / SPLIT_FILES[split], num_classes)
    return [LabeledImage(load_pixels(root, r), list(r.labels), (r.id,)) for r in recs]


def read_spec(root: str | Path) -> DatasetSpec:
    d = json.loads((Path(root) / "dataset.json").read_text())
    d["classes"] = tuple(d["classes"])
    return DatasetSpec(**d)
