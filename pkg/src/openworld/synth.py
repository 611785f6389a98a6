"""Procedural stand-in dataset in the Cityscapes folder/annotation layout.

Every class gets a distinct shape family and color family so the classes are
cleanly learnable; size, position, hue and rotation are jittered per object.
Each synthetic city holds 10 images; each image holds one object per class on
a shuffled grid over a textured background. Same seed, same bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import DataError, write_ppm

IMAGES_PER_CITY = 10

# canonical families for the six road-scene classes; extras cover new names
_SHAPE_FAMILIES = {
    "car": "rectangle",
    "person": "triangle",
    "traffic_sign": "hexagon",
    "traffic_light": "disk",
    "building": "diamond",
    "vegetation": "star",
}
_COLOR_FAMILIES = {
    "car": (205, 45, 45),
    "person": (45, 90, 215),
    "traffic_sign": (235, 205, 40),
    "traffic_light": (200, 50, 205),
    "building": (235, 140, 35),
    "vegetation": (45, 185, 70),
}
_EXTRA_SHAPES = ["cross", "chevron", "rectangle", "triangle", "hexagon", "disk"]
_EXTRA_COLORS = [(45, 200, 210), (130, 55, 200), (240, 90, 140), (150, 200, 45),
                 (90, 60, 25), (230, 230, 225)]


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple
    per_class: int
    image_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.classes:
            raise DataError("need at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise DataError("class names must be unique")
        if self.per_class < 1:
            raise DataError("per_class must be >= 1")
        if len(self.classes) > 9:
            raise DataError("at most 9 classes fit the placement grid")
        if self.image_size < 96:
            raise DataError("image_size must be >= 96")
        object.__setattr__(self, "classes", tuple(self.classes))


def class_styles(classes):
    """(shape, color) per class; canonical names keep their family."""
    styles = {}
    extra_i = 0
    for name in classes:
        if name in _SHAPE_FAMILIES:
            styles[name] = (_SHAPE_FAMILIES[name], _COLOR_FAMILIES[name])
        else:
            styles[name] = (_EXTRA_SHAPES[extra_i % len(_EXTRA_SHAPES)],
                            _EXTRA_COLORS[extra_i % len(_EXTRA_COLORS)])
            extra_i += 1
    return styles


def _shape_points(family: str, r: float, rot: float):
    if family == "rectangle":
        pts = [(-r, -0.7 * r), (r, -0.7 * r), (r, 0.7 * r), (-r, 0.7 * r)]
    elif family == "triangle":
        pts = [(0, -r), (0.9 * r, 0.8 * r), (-0.9 * r, 0.8 * r)]
    elif family == "hexagon":
        pts = [(r * math.cos(a), r * math.sin(a))
               for a in np.linspace(0, 2 * math.pi, 7)[:-1]]
    elif family == "disk":
        pts = [(r * math.cos(a), r * math.sin(a))
               for a in np.linspace(0, 2 * math.pi, 21)[:-1]]
    elif family == "diamond":
        pts = [(0, -r), (0.65 * r, 0), (0, r), (-0.65 * r, 0)]
    elif family == "star":
        pts = []
        for i in range(10):
            rr = r if i % 2 == 0 else 0.45 * r
            a = i * math.pi / 5 - math.pi / 2
            pts.append((rr * math.cos(a), rr * math.sin(a)))
    elif family == "cross":
        a = 0.35 * r
        pts = [(-a, -r), (a, -r), (a, -a), (r, -a), (r, a), (a, a),
               (a, r), (-a, r), (-a, a), (-r, a), (-r, -a), (-a, -a)]
    elif family == "chevron":
        pts = [(-r, -0.7 * r), (0.2 * r, -0.7 * r), (r, 0), (0.2 * r, 0.7 * r),
               (-r, 0.7 * r), (-0.3 * r, 0)]
    else:
        raise DataError(f"unknown shape family {family!r}")
    c, s = math.cos(rot), math.sin(rot)
    return [(x * c - y * s, x * s + y * c) for x, y in pts]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    top = rng.integers(95, 125)
    bottom = rng.integers(125, 155)
    grad = np.linspace(top, bottom, size)[:, None]
    tint = rng.integers(-6, 7, size=3)
    noise = rng.integers(-12, 13, size=(size, size, 3))
    img = grad[:, :, None] + tint[None, None, :] + noise
    return np.clip(img, 0, 255).astype(np.uint8)


def _render_image(rng, classes, styles, size):
    """One image with one jittered object per class; returns (pixels, objects)."""
    grid = math.ceil(math.sqrt(len(classes)))
    cell = size / grid
    cells = [(i, j) for i in range(grid) for j in range(grid)]
    order = rng.permutation(len(cells))[:len(classes)]
    canvas = Image.fromarray(_background(rng, size))
    draw = ImageDraw.Draw(canvas)
    objects = []
    for cls, cell_idx in zip(classes, order):
        gi, gj = cells[cell_idx]
        family, base = styles[cls]
        cx = (gj + 0.5 + rng.uniform(-0.10, 0.10)) * cell
        cy = (gi + 0.5 + rng.uniform(-0.10, 0.10)) * cell
        r = rng.uniform(0.26, 0.38) * cell
        rot = rng.uniform(0, 2 * math.pi) if family not in ("rectangle", "cross") else \
            rng.uniform(-0.2, 0.2)
        color = tuple(int(np.clip(b + rng.integers(-25, 26), 10, 245)) for b in base)
        pts = [(int(round(np.clip(cx + x, 0, size - 1))),
                int(round(np.clip(cy + y, 0, size - 1))))
               for x, y in _shape_points(family, r, rot)]
        draw.polygon(pts, fill=color)
        objects.append({"label": cls, "polygon": [[x, y] for x, y in pts]})
    return np.asarray(canvas, dtype=np.uint8), objects


def generate(config: SynthConfig, out_root) -> dict:
    """Write the dataset tree; returns counts {cities, images, objects}."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    styles = class_styles(config.classes)
    rng = np.random.default_rng(config.seed)
    n_images = config.per_class
    n_cities = math.ceil(n_images / IMAGES_PER_CITY)
    written_objects = 0
    img_no = 0
    for city_i in range(n_cities):
        city = f"synthcity{city_i:02d}"
        city_dir = out_root / city
        city_dir.mkdir(exist_ok=True)
        for _ in range(min(IMAGES_PER_CITY, n_images - img_no)):
            pixels, objects = _render_image(rng, config.classes, styles,
                                            config.image_size)
            stem = f"img{img_no:04d}"
            write_ppm(city_dir / f"{stem}.ppm", pixels)
            doc = {"imgHeight": config.image_size, "imgWidth": config.image_size,
                   "objects": objects}
            (city_dir / f"{stem}_polygons.json").write_text(
                json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n",
                encoding="utf-8")
            written_objects += len(objects)
            img_no += 1
    return {"cities": n_cities, "images": img_no, "objects": written_objects}


def nearest_centroid_accuracy(train_store, test_store) -> float:
    """Mean-RGB nearest-centroid baseline; confirms the classes are learnable."""
    feats = train_store.pixels_array().reshape(len(train_store), -1, 3).mean(axis=1)
    labels = train_store.labels_array()
    k = len(train_store.label_set)
    centroids = np.stack([feats[labels == c].mean(axis=0) for c in range(k)])
    test_feats = test_store.pixels_array().reshape(len(test_store), -1, 3).mean(axis=1)
    dists = ((test_feats[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = dists.argmin(axis=1)
    return float((pred == test_store.labels_array()).mean())
