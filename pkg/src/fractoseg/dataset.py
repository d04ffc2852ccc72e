"""Annotation ingest, polygon rasterization, tiling and batch sampling.

Masks use the ids 0 background, 1 intergranular, 2 transgranular and 255 for
pixels no polygon covers. Images are 8-bit grayscale.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .optim import BACKGROUND, CLASS_NAMES, VOID

log = logging.getLogger(__name__)

LABEL_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
# region_attributes keys searched for the class label, in order
LABEL_KEYS = ("label", "class", "fracture_mode", "type", "name")
DEFAULT_BRIGHTNESS_THRESHOLD = 220
TILE_MULTIPLE = 32


class DataError(Exception):
    """Unreadable or inconsistent input data."""


class AnnotationError(DataError):
    """Malformed or semantically invalid annotation file."""


class RasterWarning(UserWarning):
    pass


# ---------------------------------------------------------------- annotations


@dataclass
class Region:
    label: str
    xs: np.ndarray
    ys: np.ndarray

    @property
    def class_id(self) -> int:
        return LABEL_IDS[self.label]


@dataclass
class AnnotationProject:
    entries: dict[str, list[Region]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def _region_list(record: dict):
    regions = record.get("regions", [])
    # VIA 1.x stores regions as {"0": {...}, "1": {...}}
    if isinstance(regions, dict):
        regions = [regions[k] for k in sorted(regions, key=lambda k: int(k) if str(k).isdigit() else k)]
    return regions


def _find_label(attrs: dict) -> str | None:
    for key in LABEL_KEYS:
        val = attrs.get(key)
        if isinstance(val, str) and val:
            return val
        if isinstance(val, dict):
            # VIA checkbox attributes: {"intergranular": true}
            chosen = [k for k, v in val.items() if v]
            if len(chosen) == 1:
                return chosen[0]
    strings = [v for v in attrs.values() if isinstance(v, str) and v]
    return strings[0] if len(strings) == 1 else None


def parse_via_json(text: str) -> AnnotationProject:
    """Parse a VGG Image Annotator export (1.x or 2.x) into polygons per image.

    Accepts either the bare ``{key: {filename, regions, ...}}`` export or a
    full project file with a ``_via_img_metadata`` section. Non-polygon shapes
    are skipped and recorded in ``project.warnings``; unknown labels raise.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"malformed VIA JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise AnnotationError("VIA JSON must be an object keyed by image")
    if "_via_img_metadata" in doc:
        doc = doc["_via_img_metadata"]

    project = AnnotationProject()
    unknown: dict[str, list[str]] = {}
    for key, record in doc.items():
        if not isinstance(record, dict) or "filename" not in record:
            raise AnnotationError(f"record {key!r} has no filename")
        fname = record["filename"]
        regions = project.entries.setdefault(fname, [])
        for i, reg in enumerate(_region_list(record)):
            shape = reg.get("shape_attributes", {})
            kind = shape.get("name")
            if kind != "polygon":
                project.warnings.append(f"{fname} region {i}: skipped non-polygon shape {kind!r}")
                continue
            xs = np.asarray(shape.get("all_points_x", []), dtype=np.float64)
            ys = np.asarray(shape.get("all_points_y", []), dtype=np.float64)
            if xs.shape != ys.shape:
                raise AnnotationError(f"{fname} region {i}: x/y point counts differ")
            if xs.size < 3:
                project.warnings.append(f"{fname} region {i}: polygon with {xs.size} vertices skipped")
                continue
            label = _find_label(reg.get("region_attributes", {}) or {})
            if label is None:
                unknown.setdefault("<missing>", []).append(f"{fname}#{i}")
                continue
            label = label.strip().lower()
            if label not in LABEL_IDS:
                unknown.setdefault(label, []).append(f"{fname}#{i}")
                continue
            regions.append(Region(label, xs, ys))
    if unknown:
        detail = "; ".join(f"{lab!r} ({', '.join(where[:3])}{'...' if len(where) > 3 else ''})"
                           for lab, where in sorted(unknown.items()))
        raise AnnotationError(f"unknown region labels: {detail}; allowed: {', '.join(CLASS_NAMES)}")
    return project


def load_via_json(path) -> AnnotationProject:
    return parse_via_json(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- rasterization


def polygon_area(xs: np.ndarray, ys: np.ndarray) -> float:
    return 0.5 * abs(float(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1))))


def fill_polygon(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray, value: int) -> None:
    """Even-odd scanline fill with the pixel-center rule, in place.

    Pixel (i, j) is set iff its center (j + 0.5, i + 0.5) is inside the polygon
    by the crossing-number test. An edge counts for a scanline iff exactly one
    endpoint lies strictly below it; centers exactly on a left edge are inside,
    on a right edge outside.
    """
    h, w = canvas.shape
    x0, y0 = xs, ys
    x1, y1 = np.roll(xs, -1), np.roll(ys, -1)
    lo = max(int(np.floor(ys.min() - 0.5)), 0)
    hi = min(int(np.ceil(ys.max() - 0.5)), h - 1)
    for i in range(lo, hi + 1):
        y = i + 0.5
        hit = (y0 > y) != (y1 > y)
        if not hit.any():
            continue
        xa, ya, xb, yb = x0[hit], y0[hit], x1[hit], y1[hit]
        cross = np.sort((xb - xa) * (y - ya) / (yb - ya) + xa)
        for left, right in zip(cross[0::2], cross[1::2]):
            j0 = max(int(np.ceil(left - 0.5)), 0)
            j1 = min(int(np.ceil(right - 0.5)), w)
            if j1 > j0:
                canvas[i, j0:j1] = value


def rasterize(regions: list[Region], dims: tuple[int, int]) -> np.ndarray:
    """Class mask (uint8, H x W) for one image's regions; later regions win."""
    h, w = dims
    mask = np.full((h, w), VOID, dtype=np.uint8)
    for k, reg in enumerate(regions):
        xs = np.clip(reg.xs, 0, w)
        ys = np.clip(reg.ys, 0, h)
        if polygon_area(xs, ys) == 0:
            warnings.warn(f"region {k} ({reg.label}) has zero area after clamping; skipped", RasterWarning)
            continue
        fill_polygon(mask, xs, ys, reg.class_id)
    return mask


# ---------------------------------------------------------------- tiling


@dataclass
class Tile:
    image: np.ndarray
    mask: np.ndarray | None
    origin: tuple[int, int]  # (y, x)


def tile(image: np.ndarray, mask: np.ndarray | None, tile_size: int, stride: int | None = None) -> list[Tile]:
    """Cut a grid of tile_size squares; partial tiles at the border are dropped."""
    if tile_size <= 0 or tile_size % TILE_MULTIPLE:
        raise ValueError(f"tile size {tile_size} must be a positive multiple of {TILE_MULTIPLE}")
    stride = stride or tile_size
    h, w = image.shape[:2]
    if mask is not None and mask.shape[:2] != (h, w):
        raise DataError(f"mask {mask.shape} and image {image.shape} differ in size")
    if tile_size > h or tile_size > w:
        warnings.warn(f"tile {tile_size} larger than image {h}x{w}; no tiles produced", RasterWarning)
        return []
    out = []
    for y in range(0, h - tile_size + 1, stride):
        for x in range(0, w - tile_size + 1, stride):
            sl = (slice(y, y + tile_size), slice(x, x + tile_size))
            out.append(Tile(image[sl].copy(), None if mask is None else mask[sl].copy(), (y, x)))
    return out


def untile(tiles: list[Tile], shape: tuple[int, ...], fill=0, which: str = "image") -> np.ndarray:
    """Paste tiles back at their origins onto a canvas of `shape`."""
    first = getattr(tiles[0], which) if tiles else None
    canvas = np.full(shape, fill, dtype=first.dtype if first is not None else np.uint8)
    for t in tiles:
        arr = getattr(t, which)
        y, x = t.origin
        canvas[y:y + arr.shape[0], x:x + arr.shape[1]] = arr
    return canvas


def pad_to_multiple(image: np.ndarray, multiple: int = TILE_MULTIPLE, mode: str = "reflect") -> np.ndarray:
    """Pad H and W (bottom/right) up to the next multiple."""
    h, w = image.shape[:2]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return image
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode=mode)


def brightness_mask(image: np.ndarray, threshold: int = DEFAULT_BRIGHTNESS_THRESHOLD) -> np.ndarray:
    """True where a pixel may be evaluated, i.e. intensity <= threshold."""
    return np.asarray(image) <= threshold


# ---------------------------------------------------------------- image io


def read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I;16", "1"):
                warnings.warn(f"{path}: {im.mode} image converted to grayscale (Rec.601 luma)", RasterWarning)
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DataError(f"mask {path} must be single-channel 8-bit, got mode {im.mode}")
            return np.asarray(im).astype(np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc


def write_png(path, arr: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


# ---------------------------------------------------------------- manifest


SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    image: str
    mask: str
    source: str
    origin: tuple[int, int]
    void_fraction: float | None = None

    def to_dict(self) -> dict:
        d = {"image": self.image, "mask": self.mask, "source": self.source, "origin": list(self.origin)}
        if self.void_fraction is not None:
            d["void_fraction"] = self.void_fraction
        return d


@dataclass
class DatasetManifest:
    tile_size: int
    splits: dict[str, list[ManifestEntry]]
    root: Path = Path(".")

    def to_json(self) -> str:
        doc = {
            "tile_size": self.tile_size,
            "splits": {name: [e.to_dict() for e in entries] for name, entries in self.splits.items()},
        }
        return json.dumps(doc, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            splits = {
                name: [
                    ManifestEntry(e["image"], e["mask"], e.get("source", e["image"]), tuple(e.get("origin", (0, 0))),
                                  e.get("void_fraction"))
                    for e in entries
                ]
                for name, entries in doc["splits"].items()
            }
            return cls(int(doc["tile_size"]), splits, root=path.parent)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.root / q

    def split(self, name: str) -> list[ManifestEntry]:
        entries = self.splits.get(name) or []
        if not entries:
            raise DataError(f"split {name!r} is missing or empty")
        return entries


def assign_splits(sources: list[str], ratios: tuple[float, float, float], seed: int) -> dict[str, list[str]]:
    """Seeded assignment of whole source images to train/val/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    order = sorted(sources)
    rng = np.random.default_rng(seed)
    order = [order[i] for i in rng.permutation(len(order))]
    n = len(order)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }


def build_dataset(via_json, images_dir, out_dir, tile_size: int = 640, ratios=(0.8, 0.1, 0.1),
                  seed: int = 0, stride: int | None = None) -> DatasetManifest:
    """Rasterize annotations, tile images and masks to PNG, write manifest.json."""
    project = load_via_json(via_json)
    for w in project.warnings:
        log.warning(w)
    images_dir, out_dir = Path(images_dir), Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    sources = sorted(project.entries)
    assignment = assign_splits(sources, ratios, seed)
    split_of = {src: name for name, srcs in assignment.items() for src in srcs}
    splits: dict[str, list[ManifestEntry]] = {name: [] for name in SPLITS}
    for src in sources:
        img_path = images_dir / src
        if not img_path.exists():
            raise DataError(f"annotated image {img_path} not found")
        image = read_gray(img_path)
        try:
            mask = rasterize(project.entries[src], image.shape)
        except Exception as exc:
            raise DataError(f"{src}: rasterization failed: {exc}") from exc
        stem = Path(src).stem
        for t in tile(image, mask, tile_size, stride):
            y, x = t.origin
            name = f"{stem}_y{y:05d}_x{x:05d}.png"
            write_png(out_dir / "images" / name, t.image)
            write_png(out_dir / "masks" / name, t.mask)
            splits[split_of[src]].append(ManifestEntry(
                f"images/{name}", f"masks/{name}", src, (y, x), float(np.mean(t.mask == VOID))))
    manifest = DatasetManifest(tile_size, splits, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------- batches


def to_input(images: np.ndarray) -> np.ndarray:
    """uint8 (N, H, W) -> float32 (N, 1, H, W) scaled to [0, 1]."""
    return (np.asarray(images, dtype=np.float32) / 255.0)[:, None]


def training_target(masks: np.ndarray, void_policy: str = "background") -> np.ndarray:
    """Map void pixels for the loss: to background, or kept as 255 to be ignored."""
    t = np.asarray(masks).astype(np.int64)
    if void_policy == "background":
        t[t == VOID] = BACKGROUND
    elif void_policy != "ignore":
        raise ValueError(f"unknown void policy {void_policy!r}")
    return t


class TileSet:
    """In-memory (image, mask) pairs with seeded batch sampling."""

    def __init__(self, images, masks, names=None):
        self.images = [np.asarray(i, dtype=np.uint8) for i in images]
        self.masks = [np.asarray(m, dtype=np.uint8) for m in masks]
        if len(self.images) != len(self.masks):
            raise DataError("image and mask counts differ")
        self.names = list(names) if names is not None else [str(i) for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: str) -> "TileSet":
        entries = manifest.split(split)
        images, masks = [], []
        for e in entries:
            img_path, mask_path = manifest.resolve(e.image), manifest.resolve(e.mask)
            img, msk = read_gray(img_path), read_mask(mask_path)
            if img.shape != msk.shape:
                raise DataError(f"{img_path} and {mask_path} differ in size")
            images.append(img)
            masks.append(msk)
        return cls(images, masks, [e.image for e in entries])

    def batches(self, batch_size: int, seed: int, void_policy: str = "background") -> Iterator[tuple]:
        """Endless stream of (input, target) batches.

        Indices come from a seeded permutation that is redrawn each time it is
        used up; a batch may straddle two permutations.
        """
        if len(self) == 0:
            raise DataError("cannot draw batches from an empty split")
        rng = np.random.default_rng(seed)
        order: list[int] = []
        while True:
            idx = []
            while len(idx) < batch_size:
                if not order:
                    order = rng.permutation(len(self)).tolist()
                idx.append(order.pop(0))
            yield (to_input(np.stack([self.images[i] for i in idx])),
                   training_target(np.stack([self.masks[i] for i in idx]), void_policy))


def batch_iterator(manifest: DatasetManifest, split: str, batch_size: int, seed: int,
                   void_policy: str = "background") -> Iterator[tuple]:
    return TileSet.from_manifest(manifest, split).batches(batch_size, seed, void_policy)
