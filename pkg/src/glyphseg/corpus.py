"""Polygon annotations to binary masks, resizing, splits, and the corpus manifest.

Annotation input is a LabelMe-compatible JSON subset: an object with
"imagePath", "imageWidth"/"imageHeight" and "shapes", where each shape is
{"label", "points", "shape_type": "polygon"}. Unknown keys are ignored;
non-polygon shapes are skipped with a warning count.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from .errors import (
    DataError,
    DegeneratePolygon,
    EmptyInput,
    MalformedDocument,
    MissingField,
    NoPolygons,
    TooFewRecords,
)

log = logging.getLogger(__name__)

# Pixel (i, j) is foreground iff its center (j+0.5, i+0.5) lies inside the
# polygon under the even-odd rule. Boundary hits are resolved by nudging the
# sample point toward the polygon centroid.
CENTER_NUDGE = 1e-9

DEFAULT_INPUT_SIZE = 256

SPLIT_NAMES = ("train", "val", "test")


# -- domain types --------------------------------------------------------------


@dataclass(frozen=True)
class PolygonAnnotation:
    """One glyph-block ring; vertex order defines it, last->first edge implied."""

    label: str
    points: tuple[tuple[float, float], ...]
    clamped: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.points) < 3:
            raise DegeneratePolygon(f"polygon {self.label!r} has {len(self.points)} vertices")
        for x, y in self.points:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise MalformedDocument(f"polygon {self.label!r} has non-finite vertex ({x}, {y})")


@dataclass
class AnnotationDocument:
    """All polygon annotations of a single image."""

    image_id: str
    image_width: int
    image_height: int
    image_path: str
    shapes: list[PolygonAnnotation]
    skipped_shapes: int = field(default=0, compare=False)


@dataclass
class GlyphMask:
    """Binary mask; scope is image_level or a single labelled block."""

    bits: np.ndarray
    scope: str = "image_level"
    label: str | None = None

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ValueError("mask values must be strictly binary")
        self.bits = bits.astype(np.uint8)

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    def foreground_count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint, exhaustive partition of [0, n) into train/val/test indices."""

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.val), len(self.test))


@dataclass(frozen=True)
class BlockRecord:
    label: str
    polygon: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    image_path: str
    mask_path: str
    split: str
    blocks: tuple[BlockRecord, ...]


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    corpus_seed: int
    created_at: str
    tool_version: str = __version__

    def for_split(self, split: str) -> list[ManifestRecord]:
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]


@dataclass
class CorpusItem:
    """One manifest record loaded and resized to model-input resolution."""

    image_id: str
    image: np.ndarray
    mask: GlyphMask
    block_masks: tuple[GlyphMask, ...] = ()


# -- annotation parsing --------------------------------------------------------


def parse_annotation_document(raw: bytes | str) -> AnnotationDocument:
    """Parse annotation JSON into a document, skipping non-polygon shapes.

    Raises MalformedDocument for unparseable input, MissingField when a
    required key is absent, and NoPolygons when zero usable shapes remain.
    Out-of-bounds vertices are clamped to the image rectangle and flagged.
    """
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"not UTF-8: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise MalformedDocument("top-level value must be an object")

    for key in ("imagePath", "imageWidth", "imageHeight", "shapes"):
        if key not in data:
            raise MissingField(f"missing required key {key!r}")

    try:
        width = int(data["imageWidth"])
        height = int(data["imageHeight"])
    except (TypeError, ValueError) as exc:
        raise MalformedDocument(f"image dimensions are not integers: {exc}") from exc
    if width <= 0 or height <= 0:
        raise MalformedDocument(f"non-positive image size {width}x{height}")
    image_path = str(data["imagePath"])
    if not isinstance(data["shapes"], list):
        raise MalformedDocument("'shapes' must be an array")

    shapes: list[PolygonAnnotation] = []
    skipped = 0
    for shape in data["shapes"]:
        if not isinstance(shape, dict):
            raise MalformedDocument("shape entries must be objects")
        if shape.get("shape_type") != "polygon":
            skipped += 1
            continue
        points = shape.get("points")
        if not isinstance(points, list) or len(points) < 3:
            skipped += 1
            continue
        label = str(shape.get("label", ""))
        clamped = False
        verts: list[tuple[float, float]] = []
        for pt in points:
            try:
                x, y = float(pt[0]), float(pt[1])
            except (TypeError, ValueError, IndexError) as exc:
                raise MalformedDocument(f"bad vertex in {label!r}: {pt!r}") from exc
            if not (math.isfinite(x) and math.isfinite(y)):
                raise MalformedDocument(f"non-finite vertex in {label!r}")
            cx = min(max(x, 0.0), float(width))
            cy = min(max(y, 0.0), float(height))
            clamped = clamped or cx != x or cy != y
            verts.append((cx, cy))
        shapes.append(PolygonAnnotation(label=label, points=tuple(verts), clamped=clamped))

    if skipped:
        log.warning("skipped %d non-polygon shape(s) in %s", skipped, image_path)
    if not shapes:
        raise NoPolygons(f"no usable polygon shapes in {image_path}")

    return AnnotationDocument(
        image_id=Path(image_path).stem,
        image_width=width,
        image_height=height,
        image_path=image_path,
        shapes=shapes,
        skipped_shapes=skipped,
    )


def serialize_annotation_document(doc: AnnotationDocument) -> str:
    """Inverse of parse_annotation_document over the supported JSON subset."""
    payload = {
        "imagePath": doc.image_path,
        "imageWidth": doc.image_width,
        "imageHeight": doc.image_height,
        "shapes": [
            {
                "label": shape.label,
                "points": [[x, y] for x, y in shape.points],
                "shape_type": "polygon",
            }
            for shape in doc.shapes
        ],
    }
    return json.dumps(payload, indent=2)


# -- rasterization ---------------------------------------------------------------


def _clamped_vertices(poly: PolygonAnnotation, height: int, width: int) -> np.ndarray:
    pts = np.asarray(poly.points, dtype=np.float64)
    pts[:, 0] = np.clip(pts[:, 0], 0.0, float(width))
    pts[:, 1] = np.clip(pts[:, 1], 0.0, float(height))
    return pts


def _shoelace_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def rasterize_polygon(poly: PolygonAnnotation, height: int, width: int) -> GlyphMask:
    """Rasterize one polygon onto an height x width grid.

    A pixel is foreground iff its center lies inside the ring under the
    even-odd rule; centers are nudged by CENTER_NUDGE toward the polygon
    centroid so boundary hits resolve consistently. Raises DegeneratePolygon
    for rings with fewer than 3 vertices or zero area after clamping.
    """
    if len(poly.points) < 3:
        raise DegeneratePolygon(f"polygon {poly.label!r} has {len(poly.points)} vertices")
    pts = _clamped_vertices(poly, height, width)
    if abs(_shoelace_area(pts)) < 1e-12:
        raise DegeneratePolygon(f"polygon {poly.label!r} has zero area after clamping")

    cx, cy = pts.mean(axis=0)
    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    px = px + CENTER_NUDGE * (cx - px)
    py = py + CENTER_NUDGE * (cy - py)
    px = np.broadcast_to(px[None, :], (height, width))
    py = np.broadcast_to(py[:, None], (height, width))

    inside = np.zeros((height, width), dtype=bool)
    closed = np.vstack([pts, pts[:1]])
    for (x0, y0), (x1, y1) in zip(closed[:-1], closed[1:]):
        if y0 == y1:
            continue
        crosses = (y0 > py) != (y1 > py)
        cross_x = (x1 - x0) * (py - y0) / (y1 - y0) + x0
        inside ^= crosses & (px < cross_x)

    return GlyphMask(inside.astype(np.uint8), scope="block", label=poly.label)


def build_image_mask(doc: AnnotationDocument) -> GlyphMask:
    """Pixelwise OR of all per-block rasterizations."""
    if not doc.shapes:
        raise NoPolygons(f"document {doc.image_id!r} has no polygons")
    bits = np.zeros((doc.image_height, doc.image_width), dtype=np.uint8)
    for shape in doc.shapes:
        block = rasterize_polygon(shape, doc.image_height, doc.image_width)
        np.logical_or(bits, block.bits, out=bits, casting="unsafe")
    return GlyphMask(bits, scope="image_level")


# -- resizing --------------------------------------------------------------------


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    # center-aligned nearest-neighbor mapping; identity when src == dst
    idx = np.floor((np.arange(dst) + 0.5) * src / dst).astype(np.int64)
    return np.minimum(idx, src - 1)


def resize_mask(mask: GlyphMask, target: int) -> GlyphMask:
    """Nearest-neighbor resize to target x target, re-binarized."""
    if target <= 0:
        raise EmptyInput(f"non-positive resize target {target}")
    if mask.bits.size == 0:
        raise EmptyInput("empty mask")
    if mask.height == target and mask.width == target:
        return GlyphMask(mask.bits.copy(), scope=mask.scope, label=mask.label)
    rows = _nearest_indices(mask.height, target)
    cols = _nearest_indices(mask.width, target)
    out = (mask.bits[rows][:, cols] > 0).astype(np.uint8)
    return GlyphMask(out, scope=mask.scope, label=mask.label)


def resize_pair(
    image: np.ndarray | None, mask: GlyphMask, target: int = DEFAULT_INPUT_SIZE
) -> tuple[np.ndarray | None, GlyphMask]:
    """Resize an image/mask pair to target x target.

    The image is resampled bilinearly, the mask nearest-neighbor and then
    re-binarized. Aspect ratio is not preserved (direct resize).
    """
    out_mask = resize_mask(mask, target)
    if image is None:
        return None, out_mask
    image = np.asarray(image)
    if image.size == 0:
        raise EmptyInput("empty image")
    if image.shape[0] == target and image.shape[1] == target:
        return image.copy(), out_mask
    out_image = cv2.resize(image, (target, target), interpolation=cv2.INTER_LINEAR)
    return out_image, out_mask


# -- splits ----------------------------------------------------------------------


def split_dataset(n: int, seed: int) -> SplitAssignment:
    """Partition [0, n) into train/val/test by a seeded shuffle.

    Sizes are (round(0.64 n), round(0.16 n), remainder); at n=117 this gives
    the canonical (75, 19, 23).
    """
    if n < 3:
        raise TooFewRecords(f"need at least 3 records to split, got {n}")
    n_train = round(0.64 * n)
    n_val = round(0.16 * n)
    n_test = n - n_train - n_val
    perm = np.random.default_rng(seed).permutation(n)
    train = tuple(sorted(int(i) for i in perm[:n_train]))
    val = tuple(sorted(int(i) for i in perm[n_train : n_train + n_val]))
    test = tuple(sorted(int(i) for i in perm[n_train + n_val :]))
    for name, part in zip(SPLIT_NAMES, (train, val, test)):
        if not part:
            log.warning("split %r is empty at n=%d", name, n)
    assert len(train) + len(val) + len(test) == n and n_test == len(test)
    return SplitAssignment(train=train, val=val, test=test)


# -- image / mask files ------------------------------------------------------------


def save_mask_png(mask: GlyphMask, path: str | Path) -> Path:
    """Write a single-channel PNG, foreground 255 / background 0."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), mask.bits * np.uint8(255)):
        raise DataError(f"failed to write mask {path}")
    return path


def load_mask_png(path: str | Path, scope: str = "image_level", label: str | None = None) -> GlyphMask:
    arr = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if arr is None:
        raise DataError(f"mask not readable: {path}")
    return GlyphMask((arr > 127).astype(np.uint8), scope=scope, label=label)


def load_image_rgb(path: str | Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DataError(f"image not readable: {path}")
    return bgr[:, :, ::-1].copy()


def save_image_rgb(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.asarray(image)[:, :, ::-1]):
        raise DataError(f"failed to write image {path}")
    return path


# -- manifest --------------------------------------------------------------------


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """JSON-lines manifest; first line is the header record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "corpus_seed": manifest.corpus_seed,
        "created_at": manifest.created_at,
        "tool_version": manifest.tool_version,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in manifest.records:
            fh.write(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "image_path": rec.image_path,
                        "mask_path": rec.mask_path,
                        "split": rec.split,
                        "blocks": [
                            {"label": b.label, "polygon": [[x, y] for x, y in b.polygon]}
                            for b in rec.blocks
                        ],
                    }
                )
                + "\n"
            )
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise MalformedDocument(f"empty manifest {path}")
    try:
        header = json.loads(lines[0])
        if "corpus_seed" not in header:
            raise MalformedDocument(f"manifest header missing corpus_seed: {path}")
        records = []
        for line in lines[1:]:
            if not line.strip():
                continue
            data = json.loads(line)
            records.append(
                ManifestRecord(
                    image_id=data["image_id"],
                    image_path=data["image_path"],
                    mask_path=data["mask_path"],
                    split=data["split"],
                    blocks=tuple(
                        BlockRecord(label=b["label"], polygon=tuple((float(x), float(y)) for x, y in b["polygon"]))
                        for b in data.get("blocks", [])
                    ),
                )
            )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedDocument(f"bad manifest {path}: {exc}") from exc
    return DatasetManifest(
        records=records,
        corpus_seed=int(header["corpus_seed"]),
        created_at=str(header.get("created_at", "")),
        tool_version=str(header.get("tool_version", "")),
    )


def assign_splits(records: list[ManifestRecord], seed: int) -> list[ManifestRecord]:
    """Re-assign splits over records sorted by image_id; deterministic per seed."""
    ordered = sorted(records, key=lambda r: r.image_id)
    assignment = split_dataset(len(ordered), seed)
    out: list[ManifestRecord] = []
    for split, indices in zip(SPLIT_NAMES, (assignment.train, assignment.val, assignment.test)):
        for i in indices:
            out.append(dataclasses.replace(ordered[i], split=split))
    out.sort(key=lambda r: r.image_id)
    return out


def ingest_annotations(
    annotations_dir: str | Path,
    out_dir: str | Path,
    seed: int,
    created_at: str | None = None,
) -> DatasetManifest:
    """Parse a directory of annotation JSONs into masks plus a split manifest.

    Documents with zero polygons are excluded with a warning; any other
    parse failure aborts the ingest.
    """
    annotations_dir = Path(annotations_dir)
    out_dir = Path(out_dir)
    if not annotations_dir.is_dir():
        raise DataError(f"annotations directory not found: {annotations_dir}")
    paths = sorted(annotations_dir.glob("*.json"))
    if not paths:
        raise DataError(f"no annotation JSON files in {annotations_dir}")

    records: list[ManifestRecord] = []
    seen: set[str] = set()
    for ann_path in paths:
        try:
            doc = parse_annotation_document(ann_path.read_bytes())
        except NoPolygons:
            log.warning("excluding %s: no polygons", ann_path.name)
            continue
        if doc.image_id in seen:
            raise DataError(f"duplicate image_id {doc.image_id!r} from {ann_path.name}")
        seen.add(doc.image_id)
        mask = build_image_mask(doc)
        mask_path = save_mask_png(mask, out_dir / "masks" / f"{doc.image_id}.png")
        image_abs = (ann_path.parent / doc.image_path).resolve()
        records.append(
            ManifestRecord(
                image_id=doc.image_id,
                image_path=os.path.relpath(image_abs, out_dir),
                mask_path=str(mask_path.relative_to(out_dir)),
                split="train",
                blocks=tuple(BlockRecord(label=s.label, polygon=s.points) for s in doc.shapes),
            )
        )
    if not records:
        raise DataError(f"no usable annotation documents in {annotations_dir}")

    manifest = DatasetManifest(
        records=assign_splits(records, seed),
        corpus_seed=seed,
        created_at=created_at or utc_now_iso(),
    )
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def load_corpus_items(
    records: list[ManifestRecord],
    data_root: str | Path,
    input_size: int,
    with_blocks: bool = False,
) -> list[CorpusItem]:
    """Load and resize images plus masks (and optionally per-block masks)."""
    data_root = Path(data_root)
    items: list[CorpusItem] = []
    for rec in records:
        image = load_image_rgb(_resolve(data_root, rec.image_path))
        mask = load_mask_png(_resolve(data_root, rec.mask_path))
        orig_h, orig_w = mask.height, mask.width
        image, mask = resize_pair(image, mask, input_size)
        block_masks: tuple[GlyphMask, ...] = ()
        if with_blocks:
            blocks = []
            for blk in rec.blocks:
                poly = PolygonAnnotation(label=blk.label, points=blk.polygon)
                blocks.append(resize_mask(rasterize_polygon(poly, orig_h, orig_w), input_size))
            block_masks = tuple(blocks)
        items.append(CorpusItem(image_id=rec.image_id, image=image, mask=mask, block_masks=block_masks))
    return items


def _resolve(data_root: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else data_root / p
