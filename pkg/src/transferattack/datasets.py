"""Labeled image sets: the synthetic shape generator, PNG directory I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage

from .images import check_image


@dataclass
class LabeledDataset:
    """Images (``N x H x W x C`` uint8) with integer labels into ``class_names``."""

    images: np.ndarray
    labels: np.ndarray
    class_names: List[str]
    ids: Optional[List[str]] = None
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = [str(c) for c in self.class_names]
        if self.images.ndim != 4:
            raise ValueError(f"images must be NxHxWxC, got shape {self.images.shape}")
        if self.images.dtype != np.uint8:
            raise ValueError("dataset images must be uint8")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label index outside the class-name list")
        if self.ids is None:
            self.ids = [f"img-{i:05d}" for i in range(len(self.images))]
        self.ids = [str(i) for i in self.ids]
        if len(set(self.ids)) != len(self.ids) or len(self.ids) != len(self.images):
            raise ValueError("image ids must be unique, one per image")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def label_names(self) -> List[str]:
        return [self.class_names[i] for i in self.labels]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(
            self.images[index],
            self.labels[index],
            list(self.class_names),
            [self.ids[i] for i in np.arange(len(self))[index]],
            dict(self.provenance),
        )


# ---------------------------------------------------------------- synthetic


def _disc(u, v, rng):
    return u**2 + v**2 <= 1.0


def _square(u, v, rng):
    return np.maximum(abs(u), abs(v)) <= 0.8


def _triangle(u, v, rng):
    return (v <= 0.8) & (abs(u) <= (v + 0.9) * 0.55)


def _ring(u, v, rng):
    r = np.sqrt(u**2 + v**2)
    return (r >= 0.55) & (r <= 1.0)


def _stripes(axis):
    def mask(u, v, rng, x=None, y=None):
        period = rng.integers(4, 9)
        phase = rng.integers(0, period)
        coord = {"h": y, "v": x, "d": x + y}[axis]
        return ((coord + phase) // (period / 2.0)) % 2 == 0

    mask.texture = True
    return mask


def _checker(u, v, rng, x=None, y=None):
    cell = rng.integers(3, 7)
    ox, oy = rng.integers(0, cell, size=2)
    return (((x + ox) // cell) + ((y + oy) // cell)) % 2 == 0


_checker.texture = True


def _plus(u, v, rng):
    inside = np.maximum(abs(u), abs(v)) <= 1.0
    return inside & ((abs(u) <= 0.28) | (abs(v) <= 0.28))


def _xcross(u, v, rng):
    inside = np.maximum(abs(u), abs(v)) <= 1.0
    return inside & ((abs(u - v) <= 0.35) | (abs(u + v) <= 0.35))


def _frame(u, v, rng):
    m = np.maximum(abs(u), abs(v))
    return (m >= 0.6) & (m <= 0.95)


def _dots(u, v, rng, x=None, y=None):
    period = rng.integers(5, 8)
    ox, oy = rng.integers(0, period, size=2)
    dx = (x + ox) % period - period / 2.0
    dy = (y + oy) % period - period / 2.0
    return dx**2 + dy**2 <= (period / 3.5) ** 2


_dots.texture = True


def _split(u, v, rng, x=None, y=None):
    return x < x.shape[1] / 2.0 + rng.integers(-3, 4)


_split.texture = True


def _diamond(u, v, rng):
    return abs(u) + abs(v) <= 1.0


def _ellipse(u, v, rng):
    return u**2 + (v / 0.45) ** 2 <= 1.0


def _crescent(u, v, rng):
    return (u**2 + v**2 <= 1.0) & ((u - 0.45) ** 2 + v**2 > 0.6)


def _hexagon(u, v, rng):
    return (abs(v) <= 0.85) & (abs(u) * 0.866 + abs(v) * 0.5 <= 0.85)


def _star(u, v, rng):
    r = np.sqrt(u**2 + v**2)
    theta = np.arctan2(v, u)
    return r <= 0.55 + 0.4 * np.cos(5 * theta)


def _lshape(u, v, rng):
    inside = np.maximum(abs(u), abs(v)) <= 0.9
    return inside & ((u <= -0.3) | (v >= 0.3))


def _tshape(u, v, rng):
    inside = np.maximum(abs(u), abs(v)) <= 0.9
    return inside & ((v <= -0.45) | (abs(u) <= 0.25))


def _pair(u, v, rng):
    return ((u + 0.5) ** 2 + v**2 <= 0.2) | ((u - 0.5) ** 2 + v**2 <= 0.2)


def _semicircle(u, v, rng):
    return (u**2 + v**2 <= 1.0) & (v >= 0)


def _arrow(u, v, rng):
    shaft = (abs(v) <= 0.2) & (u >= -0.9) & (u <= 0.2)
    tip = (u > 0.2) & (u <= 0.9) & (abs(v) <= (0.9 - u) * 0.9)
    return shaft | tip


def _grid(u, v, rng, x=None, y=None):
    period = rng.integers(5, 9)
    ox, oy = rng.integers(0, period, size=2)
    return ((x + ox) % period < 2) | ((y + oy) % period < 2)


_grid.texture = True


SHAPE_FAMILIES: Dict[str, Callable] = {
    "disc": _disc,
    "square": _square,
    "triangle": _triangle,
    "ring": _ring,
    "hstripes": _stripes("h"),
    "vstripes": _stripes("v"),
    "dstripes": _stripes("d"),
    "checker": _checker,
    "plus": _plus,
    "xcross": _xcross,
    "frame": _frame,
    "dots": _dots,
    "split": _split,
    "diamond": _diamond,
    "ellipse": _ellipse,
    "crescent": _crescent,
    "hexagon": _hexagon,
    "star": _star,
    "lshape": _lshape,
    "tshape": _tshape,
    "pair": _pair,
    "semicircle": _semicircle,
    "arrow": _arrow,
    "grid": _grid,
}
FAMILY_NAMES = list(SHAPE_FAMILIES)


MIN_CONTRAST = 80.0
NOISE_SIGMA = 8.0


def _contrasting_colors(rng):
    bg = rng.uniform(0, 255, size=3)
    while True:
        fg = rng.uniform(0, 255, size=3)
        if np.linalg.norm(fg - bg) >= MIN_CONTRAST:
            return bg, fg


def render_shape(family: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one ``size x size x 3`` uint8 sample of a shape family."""
    draw = SHAPE_FAMILIES[family]
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    bg, fg = _contrasting_colors(rng)
    if getattr(draw, "texture", False):
        mask = draw(None, None, rng, x=x, y=y)
    else:
        radius = size * rng.uniform(0.28, 0.4)
        jitter = size * 0.12
        cx = (size - 1) / 2.0 + rng.uniform(-jitter, jitter)
        cy = (size - 1) / 2.0 + rng.uniform(-jitter, jitter)
        mask = draw((x - cx) / radius, (y - cy) / radius, rng)
    img = np.where(mask[:, :, None], fg, bg)
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(
    classes: int,
    per_class: int,
    size: int = 32,
    seed: int = 0,
    families: Optional[Sequence[str]] = None,
) -> LabeledDataset:
    """Deterministic dataset of colored shapes and textures, one family per class.

    ``families`` picks which shape families become the classes (defaults to
    the first ``classes`` entries of ``FAMILY_NAMES``); disjoint family lists
    give disjoint label spaces.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if families is None:
        families = FAMILY_NAMES[:classes]
    families = list(families)
    if len(families) != classes:
        raise ValueError(f"{classes} classes requested but {len(families)} families given")
    unknown = [f for f in families if f not in SHAPE_FAMILIES]
    if unknown:
        raise ValueError(f"unknown shape families: {unknown}")
    if classes > len(FAMILY_NAMES):
        raise ValueError(f"at most {len(FAMILY_NAMES)} classes are available")

    rng = np.random.default_rng(seed)
    images = np.empty((classes * per_class, size, size, 3), dtype=np.uint8)
    labels = np.empty(classes * per_class, dtype=np.int64)
    k = 0
    for i in range(per_class):
        for c, fam in enumerate(families):
            images[k] = render_shape(fam, size, rng)
            labels[k] = c
            k += 1
    return LabeledDataset(
        images,
        labels,
        families,
        provenance={"source": "synthetic", "seed": seed, "size": size},
    )


# ---------------------------------------------------------------- PNG I/O

MANIFEST = "manifest.json"


def export_dataset(ds: LabeledDataset, out_dir) -> Path:
    """Write one PNG per item plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for img, label, ident in zip(ds.images, ds.labels, ds.ids):
        name = f"{ident}.png"
        arr = img[:, :, 0] if img.shape[2] == 1 else img
        PILImage.fromarray(arr).save(out / name, format="PNG")
        items.append({"file": name, "label": ds.class_names[label]})
    manifest = {"items": items, "classes": ds.class_names}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return out


def _fit_to_size(img: PILImage.Image, size: Tuple[int, int]) -> PILImage.Image:
    # center-crop to the target aspect ratio, then resize
    h, w = size
    iw, ih = img.size
    target = w / h
    if iw / ih > target:
        nw = round(ih * target)
        left = (iw - nw) // 2
        img = img.crop((left, 0, left + nw, ih))
    elif iw / ih < target:
        nh = round(iw / target)
        top = (ih - nh) // 2
        img = img.crop((0, top, iw, top + nh))
    return img.resize((w, h), PILImage.BILINEAR)


def ingest_image_directory(
    path,
    manifest: Union[None, str, Path, dict] = None,
    size: Tuple[int, int] = (32, 32),
) -> LabeledDataset:
    """Load a directory of images listed in a manifest.

    Images whose size differs from ``size`` are center-cropped and resized;
    every such change is recorded in ``provenance["resized"]``.
    """
    root = Path(path)
    if manifest is None:
        manifest = root / MANIFEST
    if not isinstance(manifest, dict):
        manifest = json.loads(Path(manifest).read_text())
    items = manifest.get("items") or []
    if not items:
        raise ValueError("manifest lists no images")
    for i, item in enumerate(items):
        if "file" not in item:
            raise ValueError(f"manifest item {i} has no file")
        if item.get("label") in (None, ""):
            raise ValueError(f"manifest item {i} ({item['file']}) has no label")
    classes = manifest.get("classes") or sorted({it["label"] for it in items})
    index = {c: i for i, c in enumerate(classes)}

    h, w = size
    images, labels, ids, resized = [], [], [], []
    for item in items:
        f = root / item["file"]
        if item["label"] not in index:
            raise ValueError(f"label {item['label']!r} of {f.name} is not in the class list")
        try:
            with PILImage.open(f) as img:
                img.load()
                img = img.convert("RGB")
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot read image {f}: {exc}") from exc
        if img.size != (w, h):
            resized.append({"file": item["file"], "from": [img.size[1], img.size[0]], "to": [h, w]})
            img = _fit_to_size(img, (h, w))
        images.append(np.asarray(img, dtype=np.uint8))
        labels.append(index[item["label"]])
        ids.append(Path(item["file"]).stem)
    arr = np.stack(images)
    for x in arr:
        check_image(x)
    return LabeledDataset(
        arr,
        np.array(labels),
        list(classes),
        ids,
        provenance={"source": str(root), "size": [h, w], "resized": resized},
    )
