"""Cityscapes-format ingestion: polygon annotations to 64x64 labeled crops.

Layout expected on disk: <root>/<city>/<image>.ppm (or .png) with a sibling
<image>_polygons.json annotation per image. Crops are stored as uint8 RGB and
exposed to the networks as float32 in [0,1] (value/255).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CROP_SIZE = 64
MIN_CROP_PX = 10  # below this the object is too small to classify; see ingest()

STORE_MAGIC = b"OWC1"
STORE_VERSION = 1


class DataError(ValueError):
    """Problem with input data or data-handling parameters."""


class AnnotationError(DataError):
    """Malformed annotation document; message carries a location."""


class CropTooSmallError(DataError):
    """Bounding box degenerate (under 2 px on a side)."""


class StoreFormatError(DataError):
    """Corrupt or unsupported crop-store file."""


# ---------------------------------------------------------------------------
# label registry

class LabelSet:
    """Ordered, append-only class-name registry; indices are stable forever."""

    def __init__(self, names=()):
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        if not name:
            raise DataError("empty class name")
        if name in self._index:
            raise DataError(f"duplicate class name {name!r}")
        self._index[name] = len(self._names)
        self._names.append(name)
        return self._index[name]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"unknown class name {name!r}") from None

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> tuple:
        return tuple(self._names)

    def __len__(self):
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, LabelSet) and self._names == other._names

    def copy(self) -> "LabelSet":
        return LabelSet(self._names)

    def __repr__(self):
        return f"LabelSet({self._names!r})"


# ---------------------------------------------------------------------------
# core types

@dataclass(frozen=True)
class LabeledPolygon:
    label: str
    points: tuple  # ((x, y), ...) ints, >= 3 points


@dataclass(frozen=True)
class Sample:
    pixels_u8: np.ndarray  # (64, 64, 3) uint8
    label_id: int
    provenance: tuple  # (city, image_id, polygon_index)

    @property
    def pixels(self) -> np.ndarray:
        """Float32 view in [0,1], shape (64, 64, 3)."""
        return self.pixels_u8.astype(np.float32) / 255.0


@dataclass(frozen=True)
class CityPartition:
    train_cities: tuple
    test_cities: tuple


class CropStore:
    """Ordered list of Samples plus the LabelSet their label ids index into."""

    def __init__(self, label_set: LabelSet, samples=None):
        self.label_set = label_set
        self.samples: list[Sample] = list(samples) if samples else []
        for s in self.samples:
            self._check(s)

    def _check(self, sample: Sample):
        if not 0 <= sample.label_id < len(self.label_set):
            raise DataError(f"label id {sample.label_id} outside label set "
                            f"of size {len(self.label_set)}")
        if sample.pixels_u8.shape != (CROP_SIZE, CROP_SIZE, 3):
            raise DataError(f"sample shape {sample.pixels_u8.shape} != "
                            f"({CROP_SIZE}, {CROP_SIZE}, 3)")

    def add(self, sample: Sample):
        self._check(sample)
        self.samples.append(sample)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def pixels_array(self, dtype=np.float32) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, CROP_SIZE, CROP_SIZE, 3), dtype=dtype)
        stack = np.stack([s.pixels_u8 for s in self.samples])
        return stack.astype(dtype) / 255.0

    def labels_array(self) -> np.ndarray:
        return np.array([s.label_id for s in self.samples], dtype=np.int64)

    def one_hot(self, num_classes=None, dtype=np.float32) -> np.ndarray:
        k = num_classes or len(self.label_set)
        out = np.zeros((len(self.samples), k), dtype=dtype)
        for i, s in enumerate(self.samples):
            out[i, s.label_id] = 1.0
        return out

    def counts_by_label(self) -> dict:
        counts = {name: 0 for name in self.label_set}
        for s in self.samples:
            counts[self.label_set.name(s.label_id)] += 1
        return counts

    def provenance_keys(self) -> set:
        return {s.provenance for s in self.samples}

    def subset(self, indices) -> "CropStore":
        return CropStore(self.label_set, [self.samples[i] for i in indices])

    def filter_labels(self, names) -> "CropStore":
        """New store restricted to `names`, with label ids remapped to that order."""
        target = LabelSet(names)
        out = CropStore(target)
        for s in self.samples:
            name = self.label_set.name(s.label_id)
            if name in target:
                out.add(Sample(s.pixels_u8, target.index(name), s.provenance))
        return out

    def relabel(self, target: LabelSet) -> "CropStore":
        """Same samples, ids remapped into a larger/compatible label set."""
        out = CropStore(target)
        for s in self.samples:
            out.add(Sample(s.pixels_u8, target.index(self.label_set.name(s.label_id)),
                           s.provenance))
        return out

    def partition_by_city(self, partition: CityPartition):
        train = CropStore(self.label_set,
                          [s for s in self.samples if s.provenance[0] in partition.train_cities])
        test = CropStore(self.label_set,
                         [s for s in self.samples if s.provenance[0] in partition.test_cities])
        return train, test

    def merged_with(self, other: "CropStore") -> "CropStore":
        if other.label_set.names != self.label_set.names:
            other = other.relabel(self.label_set)
        return CropStore(self.label_set, self.samples + other.samples)

    # -- binary format: magic OWC1, version, label table, then raw samples --

    def save(self, path):
        out = bytearray()
        out += STORE_MAGIC
        out += struct.pack("<H", STORE_VERSION)
        out += struct.pack("<H", len(self.label_set))
        for name in self.label_set:
            raw = name.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<I", len(self.samples))
        for s in self.samples:
            out += struct.pack("<H", s.label_id)
            city, image_id, poly_idx = s.provenance
            for text in (city, image_id):
                raw = text.encode("utf-8")
                out += struct.pack("<H", len(raw)) + raw
            out += struct.pack("<I", poly_idx)
            out += np.ascontiguousarray(s.pixels_u8, dtype=np.uint8).tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path) -> "CropStore":
        buf = Path(path).read_bytes()
        if buf[:4] != STORE_MAGIC:
            raise StoreFormatError(f"bad magic {buf[:4]!r} in {path}")
        off = 4
        (version,) = struct.unpack_from("<H", buf, off)
        off += 2
        if version != STORE_VERSION:
            raise StoreFormatError(f"unsupported crop-store version {version}")
        (n_labels,) = struct.unpack_from("<H", buf, off)
        off += 2
        names = []
        for _ in range(n_labels):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            names.append(buf[off:off + n].decode("utf-8"))
            off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        store = cls(LabelSet(names))
        px_bytes = CROP_SIZE * CROP_SIZE * 3
        for _ in range(count):
            (label_id,) = struct.unpack_from("<H", buf, off)
            off += 2
            texts = []
            for _ in range(2):
                (n,) = struct.unpack_from("<H", buf, off)
                off += 2
                texts.append(buf[off:off + n].decode("utf-8"))
                off += n
            (poly_idx,) = struct.unpack_from("<I", buf, off)
            off += 4
            pixels = np.frombuffer(buf[off:off + px_bytes], dtype=np.uint8)
            if pixels.size != px_bytes:
                raise StoreFormatError(f"truncated sample data in {path}")
            off += px_bytes
            store.add(Sample(pixels.reshape(CROP_SIZE, CROP_SIZE, 3).copy(),
                             label_id, (texts[0], texts[1], poly_idx)))
        return store


# ---------------------------------------------------------------------------
# annotation parsing

def parse_annotation(document: str, source: str = "<annotation>") -> list:
    """Parse a Cityscapes-style polygon annotation into LabeledPolygons.

    Points outside the stated image bounds are clamped (with a warning);
    objects with fewer than 3 points are skipped (with a warning).
    """
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as e:
        raise AnnotationError(
            f"{source}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise AnnotationError(f"{source}: expected a JSON object at the top level")
    try:
        height = int(doc["imgHeight"])
        width = int(doc["imgWidth"])
        objects = doc["objects"]
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationError(f"{source}: missing or invalid header field: {e}") from e
    if height < 1 or width < 1:
        raise AnnotationError(f"{source}: non-positive image dimensions "
                              f"{width}x{height}")
    if not isinstance(objects, list):
        raise AnnotationError(f"{source}: 'objects' must be an array")

    polygons = []
    for idx, obj in enumerate(objects):
        where = f"{source}: object {idx}"
        if not isinstance(obj, dict) or "label" not in obj or "polygon" not in obj:
            raise AnnotationError(f"{where}: needs 'label' and 'polygon' fields")
        label = obj["label"]
        if not isinstance(label, str) or not label:
            raise AnnotationError(f"{where}: label must be a non-empty string")
        raw_points = obj["polygon"]
        if not isinstance(raw_points, list):
            raise AnnotationError(f"{where}: polygon must be an array of [x, y] pairs")
        if len(raw_points) < 3:
            log.warning("%s: skipping polygon with %d < 3 points", where, len(raw_points))
            continue
        points = []
        clamped = False
        for p in raw_points:
            if not isinstance(p, (list, tuple)) or len(p) != 2:
                raise AnnotationError(f"{where}: bad point {p!r}")
            try:
                x, y = int(p[0]), int(p[1])
            except (TypeError, ValueError):
                raise AnnotationError(f"{where}: non-numeric point {p!r}") from None
            cx = min(max(x, 0), width - 1)
            cy = min(max(y, 0), height - 1)
            clamped = clamped or (cx, cy) != (x, y)
            points.append((cx, cy))
        if clamped:
            log.warning("%s: clamped out-of-bounds points to %dx%d", where, width, height)
        polygons.append(LabeledPolygon(label, tuple(points)))
    return polygons


# ---------------------------------------------------------------------------
# cropping and resizing

def min_area_crop(image: np.ndarray, polygon: LabeledPolygon) -> np.ndarray:
    """Smallest axis-aligned crop containing every polygon point (inclusive box)."""
    h, w = image.shape[:2]
    xs = np.clip([p[0] for p in polygon.points], 0, w - 1)
    ys = np.clip([p[1] for p in polygon.points], 0, h - 1)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    ch, cw = y1 - y0 + 1, x1 - x0 + 1
    if ch < 2 or cw < 2:
        raise CropTooSmallError(
            f"{polygon.label!r} box {cw}x{ch} at ({x0},{y0}) is degenerate")
    return image[y0:y1 + 1, x0:x1 + 1, :]


def _interp_weights(n_in: int, n_out: int):
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize(crop: np.ndarray, size: int = CROP_SIZE, method: str = "bilinear") -> np.ndarray:
    """Corner-aligned resize to size x size; bilinear by default, nearest by flag."""
    h, w = crop.shape[:2]
    if h < 2 or w < 2:
        raise CropTooSmallError(f"cannot resize a {w}x{h} crop")
    if method == "nearest":
        yi = np.rint(np.arange(size) * (h - 1) / (size - 1)).astype(int)
        xi = np.rint(np.arange(size) * (w - 1) / (size - 1)).astype(int)
        return crop[np.ix_(yi, xi)]
    if method != "bilinear":
        raise DataError(f"unknown resize method {method!r}")
    ylo, yhi, fy = _interp_weights(h, size)
    xlo, xhi, fx = _interp_weights(w, size)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = crop[ylo][:, xlo] * (1 - fx) + crop[ylo][:, xhi] * fx
    bot = crop[yhi][:, xlo] * (1 - fx) + crop[yhi][:, xhi] * fx
    return top * (1 - fy) + bot * fy


def resize_64(crop: np.ndarray, method: str = "bilinear") -> np.ndarray:
    return resize(crop, CROP_SIZE, method)


# ---------------------------------------------------------------------------
# partitioning

def partition_cities(cities, n_train: int, n_test: int, seed=None) -> CityPartition:
    cities = sorted(cities)
    if n_train < 1 or n_test < 1:
        raise DataError("both partitions need at least one city")
    if n_train + n_test > len(cities):
        raise DataError(f"need {n_train}+{n_test} cities, only {len(cities)} available")
    order = np.random.default_rng(seed).permutation(len(cities))
    picked = [cities[i] for i in order]
    return CityPartition(tuple(picked[:n_train]), tuple(picked[n_train:n_train + n_test]))


def split_members(store: CropStore, n_members: int, stack_fraction: float = 0.2,
                  seed=None):
    """Withhold a stacking split, then divide the rest evenly among members.

    Returns (member_stores, stacking_store); all pairwise disjoint, union == store.
    """
    if n_members < 2:
        raise DataError(f"committee needs at least 2 members, got {n_members}")
    if not 0.0 <= stack_fraction < 1.0:
        raise DataError(f"stack_fraction must be in [0,1), got {stack_fraction}")
    if len(store) < 2 * n_members:
        raise DataError(f"store of {len(store)} samples too small for "
                        f"{n_members} members")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(store))
    n_stack = int(round(len(store) * stack_fraction))
    stacking = store.subset(order[:n_stack])
    rest = order[n_stack:]
    member_stores = [store.subset(chunk) for chunk in np.array_split(rest, n_members)]
    return member_stores, stacking


# ---------------------------------------------------------------------------
# image files and directory ingestion

def write_ppm(path, pixels_u8: np.ndarray):
    h, w = pixels_u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels_u8, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise DataError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".ppm":
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def quantize(pixels_f: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels_f * 255.0), 0, 255).astype(np.uint8)


def ingest(root, labels=None, min_crop: int = MIN_CROP_PX, cities=None,
           resize_method: str = "bilinear") -> CropStore:
    """Walk <root>/<city>/<image> pairs into a CropStore, deterministically.

    labels: ordered class filter; when omitted the label set grows in
    first-encounter order. cities: restrict to these city folders.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    label_set = LabelSet(labels) if labels is not None else LabelSet()
    fixed_labels = labels is not None
    store = CropStore(label_set)
    city_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if cities is not None:
        wanted = set(cities)
        city_dirs = [d for d in city_dirs if d.name in wanted]
    skipped_small = 0
    for city_dir in city_dirs:
        images = sorted(p for p in city_dir.iterdir()
                        if p.suffix in (".ppm", ".png") and not p.name.endswith("_polygons.json"))
        for img_path in images:
            ann_path = img_path.with_name(img_path.stem + "_polygons.json")
            if not ann_path.exists():
                log.warning("%s: no annotation file, skipping", img_path)
                continue
            image = read_image(img_path).astype(np.float32) / 255.0
            polygons = parse_annotation(ann_path.read_text("utf-8"), source=str(ann_path))
            for poly_idx, poly in enumerate(polygons):
                if fixed_labels and poly.label not in label_set:
                    continue
                try:
                    crop = min_area_crop(image, poly)
                except CropTooSmallError:
                    skipped_small += 1
                    continue
                if crop.shape[0] < min_crop or crop.shape[1] < min_crop:
                    skipped_small += 1
                    continue
                if not fixed_labels and poly.label not in label_set:
                    label_set.add(poly.label)
                pixels = quantize(resize_64(crop, method=resize_method))
                store.add(Sample(pixels, label_set.index(poly.label),
                                 (city_dir.name, img_path.stem, poly_idx)))
    if skipped_small:
        log.info("ingest: skipped %d crops under %dpx", skipped_small, min_crop)
    return store
