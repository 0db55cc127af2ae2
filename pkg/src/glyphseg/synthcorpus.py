"""Synthetic stand-in corpus: glyph-like dark blocks with polygon annotations.

Images carry dark star-shaped blocks arranged in rough grid columns over a
textured background, plus distractor clutter outside the blocks. Realism is a
non-goal; the goals are separability (learnable by a small baseline) and
annotation fidelity (pixels painted as foreground match the rasterized
polygon annotations exactly, which exercises the whole ingest path).
Generation is fully deterministic per seed, with per-image derived seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .corpus import (
    AnnotationDocument,
    DatasetManifest,
    PolygonAnnotation,
    ingest_annotations,
    rasterize_polygon,
    save_image_rgb,
    serialize_annotation_document,
)
from .errors import ConfigError, GenerationFailure
from .seeding import rng_from

CLUTTER_RETRY_BUDGET = 200

BACKGROUNDS = ("textured_noise", "flat")


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 117
    image_size: int = 256
    blocks_per_image: tuple[int, int] = (2, 8)
    block_vertex_count: tuple[int, int] = (6, 14)
    background: str = "textured_noise"
    clutter_shapes: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_images < 1 or self.image_size < 16:
            raise ConfigError("n_images must be >= 1 and image_size >= 16")
        for name, (lo, hi) in (
            ("blocks_per_image", self.blocks_per_image),
            ("block_vertex_count", self.block_vertex_count),
        ):
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} range ({lo}, {hi}) is not a positive range")
        if self.block_vertex_count[0] < 3:
            raise ConfigError("blocks need at least 3 vertices")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"unknown background {self.background!r}")
        if self.clutter_shapes < 0:
            raise ConfigError("clutter_shapes must be >= 0")

    def to_mapping(self) -> dict:
        return {
            "n_images": self.n_images,
            "image_size": self.image_size,
            "blocks_per_image": list(self.blocks_per_image),
            "block_vertex_count": list(self.block_vertex_count),
            "background": self.background,
            "clutter_shapes": self.clutter_shapes,
            "seed": self.seed,
        }

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SynthConfig":
        known = {
            "n_images", "image_size", "blocks_per_image", "block_vertex_count",
            "background", "clutter_shapes", "seed",
        }
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        kwargs: dict = {}
        for key in ("n_images", "image_size", "clutter_shapes", "seed"):
            if key in mapping:
                kwargs[key] = int(mapping[key])
        for key in ("blocks_per_image", "block_vertex_count"):
            if key in mapping:
                lo, hi = mapping[key]
                kwargs[key] = (int(lo), int(hi))
        if "background" in mapping:
            kwargs["background"] = str(mapping["background"])
        return cls(**kwargs)


@dataclass
class SynthImage:
    """One generated sample plus its painted-foreground buffers per block label."""

    image_id: str
    image: np.ndarray
    document: AnnotationDocument
    paints: dict[str, np.ndarray]


# -- building blocks ------------------------------------------------------------


def _background(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    if kind == "flat":
        gray = np.full((size, size), 205.0)
    else:
        gray = rng.normal(202.0, 11.0, (size, size))
        coarse = rng.normal(0.0, 9.0, (size // 8 + 1, size // 8 + 1))
        gray += cv2.resize(coarse, (size, size), interpolation=cv2.INTER_LINEAR)
    gray = np.clip(gray, 160.0, 242.0)
    image = np.stack([gray] * 3, axis=-1)
    image[:, :, 0] = np.clip(image[:, :, 0] + 8.0, 0, 255)  # warm parchment tint
    image[:, :, 2] = np.clip(image[:, :, 2] - 8.0, 0, 255)
    return image.astype(np.uint8)


def _grid_cells(
    rng: np.random.Generator, size: int, n_blocks: int
) -> list[tuple[float, float, float]]:
    """(center_x, center_y, max_radius) per block, on disjoint grid-column cells."""
    cols = 2 if n_blocks <= 4 else 3
    rows = math.ceil(n_blocks / cols)
    margin = 0.05 * size
    cell_w = (size - 2 * margin) / cols
    cell_h = (size - 2 * margin) / rows
    jitter = 0.06 * min(cell_w, cell_h)
    max_radius = 0.5 * min(cell_w, cell_h) - jitter - 1.5
    if max_radius < 2.5:
        raise GenerationFailure(
            f"cannot fit {n_blocks} blocks into a {size}px image; increase image_size"
        )
    cells = []
    for col in range(cols):  # column-major, mimicking glyph column layout
        for row in range(rows):
            if len(cells) == n_blocks:
                break
            cx = margin + (col + 0.5) * cell_w + rng.uniform(-jitter, jitter)
            cy = margin + (row + 0.5) * cell_h + rng.uniform(-jitter, jitter)
            cells.append((cx, cy, max_radius))
    return cells


def _star_polygon(
    rng: np.random.Generator, cx: float, cy: float, radius: float, n_vertices: int
) -> tuple[tuple[float, float], ...]:
    """Simple (non-self-intersecting) ring: angles strictly increasing around the center."""
    step = 2.0 * math.pi / n_vertices
    angles = (np.arange(n_vertices) + rng.uniform(0.0, 0.35, n_vertices)) * step
    radii = rng.uniform(0.55, 1.0, n_vertices) * radius
    xs = cx + radii * np.cos(angles)
    ys = cy + radii * np.sin(angles)
    return tuple((float(x), float(y)) for x, y in zip(xs, ys))


def _paint_block(
    rng: np.random.Generator, image: np.ndarray, paint: np.ndarray
) -> None:
    """Fill the painted region with a dark glyph tone plus lighter internal strokes."""
    shade = float(rng.integers(25, 60))
    color = np.clip(shade + rng.normal(0.0, 4.0, 3), 0, 255).astype(np.uint8)
    image[paint] = color

    rows, cols = np.nonzero(paint)
    x0, x1 = int(cols.min()), int(cols.max())
    y0, y1 = int(rows.min()), int(rows.max())
    layer = image.copy()
    for _ in range(int(rng.integers(1, 4))):
        p0 = (int(rng.integers(x0, x1 + 1)), int(rng.integers(y0, y1 + 1)))
        p1 = (int(rng.integers(x0, x1 + 1)), int(rng.integers(y0, y1 + 1)))
        stroke = int(rng.integers(140, 185))
        cv2.line(layer, p0, p1, (stroke, stroke, stroke), 1)
    image[paint] = layer[paint]  # strokes clipped to the block interior


def _add_clutter(
    rng: np.random.Generator, image: np.ndarray, blocked: np.ndarray, count: int
) -> None:
    """Distractor shapes placed by rejection sampling strictly outside the blocks."""
    size = image.shape[0]
    forbidden = cv2.dilate(blocked.astype(np.uint8), np.ones((3, 3), np.uint8), iterations=2) > 0
    for _ in range(count):
        for _attempt in range(CLUTTER_RETRY_BUDGET):
            kind = int(rng.integers(0, 3))
            scratch = np.zeros((size, size), dtype=np.uint8)
            cx = int(rng.integers(4, size - 4))
            cy = int(rng.integers(4, size - 4))
            if kind == 0:
                cv2.circle(scratch, (cx, cy), int(rng.integers(3, 10)), 1, int(rng.integers(1, 3)))
            elif kind == 1:
                cv2.circle(scratch, (cx, cy), int(rng.integers(1, 4)), 1, -1)
            else:
                dx, dy = int(rng.integers(-18, 19)), int(rng.integers(-18, 19))
                cv2.line(scratch, (cx, cy), (cx + dx, cy + dy), 1, int(rng.integers(1, 3)))
            footprint = scratch > 0
            if not footprint.any() or (footprint & forbidden).any():
                continue
            tone = int(rng.integers(110, 160))
            image[footprint] = (tone, tone, tone)
            break
        else:
            raise GenerationFailure(
                f"could not place a clutter shape in {CLUTTER_RETRY_BUDGET} tries"
            )


# -- generation ---------------------------------------------------------------------


def synthesize_image(config: SynthConfig, index: int) -> SynthImage:
    """Render one deterministic sample; the seed derives from (config.seed, index)."""
    rng = rng_from(config.seed, "image", index)
    size = config.image_size
    image_id = f"synth_{index:04d}"
    image = _background(rng, size, config.background)

    n_blocks = int(rng.integers(config.blocks_per_image[0], config.blocks_per_image[1] + 1))
    shapes: list[PolygonAnnotation] = []
    paints: dict[str, np.ndarray] = {}
    union = np.zeros((size, size), dtype=bool)
    for b_idx, (cx, cy, max_radius) in enumerate(_grid_cells(rng, size, n_blocks)):
        n_vertices = int(rng.integers(config.block_vertex_count[0], config.block_vertex_count[1] + 1))
        radius = float(rng.uniform(0.62, 1.0)) * max_radius
        label = f"block_{b_idx:02d}"
        poly = PolygonAnnotation(label=label, points=_star_polygon(rng, cx, cy, radius, n_vertices))
        paint = rasterize_polygon(poly, size, size).bits.astype(bool)
        if not paint.any():
            raise GenerationFailure(f"{image_id}/{label}: polygon rasterized to zero pixels")
        _paint_block(rng, image, paint)
        shapes.append(poly)
        paints[label] = paint
        union |= paint

    if config.clutter_shapes:
        _add_clutter(rng, image, union, config.clutter_shapes)

    document = AnnotationDocument(
        image_id=image_id,
        image_width=size,
        image_height=size,
        image_path=f"../images/{image_id}.png",
        shapes=shapes,
    )
    return SynthImage(image_id=image_id, image=image, document=document, paints=paints)


def generate_synthetic_corpus(
    config: SynthConfig, out_dir: str | Path, created_at: str | None = None
) -> DatasetManifest:
    """Write images + annotation JSONs, then ingest them into masks and a manifest.

    Running the standard ingest on the generated annotations keeps the
    synthetic corpus on the exact same path as a real one.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    for index in range(config.n_images):
        sample = synthesize_image(config, index)
        save_image_rgb(out_dir / "images" / f"{sample.image_id}.png", sample.image)
        ann_path = out_dir / "annotations" / f"{sample.image_id}.json"
        ann_path.write_text(serialize_annotation_document(sample.document))
    return ingest_annotations(
        out_dir / "annotations", out_dir, seed=config.seed, created_at=created_at
    )
