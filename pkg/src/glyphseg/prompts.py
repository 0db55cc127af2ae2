"""Deterministic point and box prompt generation from ground-truth masks.

Point prompts are positive clicks drawn uniformly from foreground pixels;
box prompts are the tight foreground bounding box scaled about its center.
Every sample is seeded per (run, image, block) by hashing, so results do not
depend on iteration order or scheduling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .corpus import (
    GlyphMask,
    ManifestRecord,
    PolygonAnnotation,
    load_mask_png,
    rasterize_polygon,
    resize_mask,
)
from .errors import ConfigError, EmptyForeground, InvalidScale
from .seeding import run_seed, stable_hash


@dataclass(frozen=True)
class PointPrompt:
    """Positive click at a pixel center, in model-input coordinates."""

    x: float
    y: float
    polarity: str = "positive"


@dataclass(frozen=True)
class BoxPrompt:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")


@dataclass(frozen=True)
class PromptStrategy:
    """A named prompting regime: k random points or a scaled bbox, per image or per block."""

    kind: str
    k: int = 1
    scale: float = 0.5
    scope: str = "image_level"

    def __post_init__(self) -> None:
        if self.kind not in ("points", "box"):
            raise ConfigError(f"unknown prompt kind {self.kind!r}")
        if self.scope not in ("image_level", "per_block"):
            raise ConfigError(f"unknown prompt scope {self.scope!r}")
        if self.kind == "points" and self.k < 1:
            raise ConfigError("point strategies need k >= 1")
        if self.kind == "box" and not (0.0 < self.scale <= 2.0):
            raise InvalidScale(f"box scale {self.scale} outside (0, 2]")
        if self.scope == "per_block" and self.kind != "points":
            raise ConfigError("per_block scope is only supported for point prompts")

    def label(self) -> str:
        """Row label used in results tables, e.g. "2 random point" or "0.5 Bbox"."""
        if self.kind == "box":
            return f"{self.scale:g} Bbox"
        if self.scope == "per_block":
            return f"{self.k} random point/block" if self.k == 1 else f"{self.k} random points/block"
        return f"{self.k} random point"

    def slug(self) -> str:
        return self.label().lower().replace(" ", "-").replace("/", "-per-")

    def to_mapping(self) -> dict:
        out: dict = {"kind": self.kind, "scope": self.scope}
        if self.kind == "points":
            out["k"] = self.k
        else:
            out["scale"] = self.scale
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PromptStrategy":
        if not isinstance(mapping, dict):
            raise ConfigError(f"prompt strategy must be a mapping, got {mapping!r}")
        unknown = set(mapping) - {"kind", "k", "scale", "scope"}
        if unknown:
            raise ConfigError(f"unknown prompt strategy keys: {sorted(unknown)}")
        if "kind" not in mapping:
            raise ConfigError("prompt strategy needs a 'kind'")
        return cls(
            kind=str(mapping["kind"]),
            k=int(mapping.get("k", 1)),
            scale=float(mapping.get("scale", 0.5)),
            scope=str(mapping.get("scope", "image_level")),
        )


@dataclass(frozen=True)
class PromptSet:
    points: tuple[PointPrompt, ...] = ()
    box: BoxPrompt | None = None

    def is_empty(self) -> bool:
        return not self.points and self.box is None


def sample_point_prompts(mask: GlyphMask, k: int, item_seed: int) -> list[PointPrompt]:
    """Draw k foreground pixel centers, without replacement when possible."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    flat = np.flatnonzero(mask.bits)
    if flat.size == 0:
        raise EmptyForeground(f"mask {mask.label or mask.scope!r} has no foreground")
    rng = np.random.default_rng(item_seed)
    chosen = rng.choice(flat.size, size=k, replace=flat.size < k)
    rows, cols = np.divmod(flat[chosen], mask.width)
    return [PointPrompt(x=float(c) + 0.5, y=float(r) + 0.5) for r, c in zip(rows, cols)]


def derive_box_prompt(mask: GlyphMask, scale: float) -> BoxPrompt:
    """Tight foreground bounding box scaled by `scale` about its center.

    The result is clipped to image bounds and padded to at least 1x1.
    """
    if not (0.0 < scale <= 2.0):
        raise InvalidScale(f"scale {scale} outside (0, 2]")
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise EmptyForeground("mask has no foreground")
    x_min, x_max = float(cols.min()), float(cols.max()) + 1.0
    y_min, y_max = float(rows.min()), float(rows.max()) + 1.0
    cx, cy = (x_min + x_max) / 2.0, (y_min + y_max) / 2.0
    half_w = (x_max - x_min) * scale / 2.0
    half_h = (y_max - y_min) * scale / 2.0
    x0, x1 = _min_span(max(cx - half_w, 0.0), min(cx + half_w, float(mask.width)), float(mask.width))
    y0, y1 = _min_span(max(cy - half_h, 0.0), min(cy + half_h, float(mask.height)), float(mask.height))
    return BoxPrompt(x_min=x0, y_min=y0, x_max=x1, y_max=y1)


def _min_span(lo: float, hi: float, bound: float) -> tuple[float, float]:
    if hi - lo >= 1.0:
        return lo, hi
    center = (lo + hi) / 2.0
    lo, hi = center - 0.5, center + 0.5
    if lo < 0.0:
        return 0.0, 1.0
    if hi > bound:
        return bound - 1.0, bound
    return lo, hi


def prompt_pairs_from_masks(
    image_id: str,
    image_mask: GlyphMask,
    block_masks: Sequence[GlyphMask],
    strategy: PromptStrategy,
    context_seed: int,
) -> list[tuple[GlyphMask, PromptSet]]:
    """One (target mask, PromptSet) pair per target under the strategy's scope.

    The per-item seed is stable_hash(context_seed, image_id, block_label),
    so results are independent of iteration order.
    """
    if strategy.scope == "image_level":
        targets = [image_mask]
    else:
        targets = list(block_masks)
    pairs = []
    for target in targets:
        item_seed = stable_hash(context_seed, image_id, target.label or "")
        pairs.append((target, sample_prompt_set(target, strategy, item_seed)))
    return pairs


def sample_prompt_set(mask: GlyphMask, strategy: PromptStrategy, item_seed: int) -> PromptSet:
    """One PromptSet for a single target mask under the strategy's kind."""
    if strategy.kind == "points":
        return PromptSet(points=tuple(sample_point_prompts(mask, strategy.k, item_seed)))
    return PromptSet(box=derive_box_prompt(mask, strategy.scale))


def prompts_for_strategy(
    record: ManifestRecord,
    strategy: PromptStrategy,
    base_seed: int,
    run_index: int,
    *,
    data_root: str | Path,
    input_size: int,
) -> list[tuple[GlyphMask, PromptSet]]:
    """Load the record's masks at model-input resolution and sample prompts.

    Evaluation run seeds are base_seed + run_index.
    """
    data_root = Path(data_root)
    mask_path = Path(record.mask_path)
    if not mask_path.is_absolute():
        mask_path = data_root / mask_path
    full = load_mask_png(mask_path)
    orig_h, orig_w = full.height, full.width
    image_mask = resize_mask(full, input_size)
    block_masks: list[GlyphMask] = []
    if strategy.scope == "per_block":
        for blk in record.blocks:
            poly = PolygonAnnotation(label=blk.label, points=blk.polygon)
            block_masks.append(resize_mask(rasterize_polygon(poly, orig_h, orig_w), input_size))
    return prompt_pairs_from_masks(
        record.image_id, image_mask, block_masks, strategy, run_seed(base_seed, run_index)
    )


def prompt_dump_line(image_id: str, block_label: str, run_index: int, prompt_set: PromptSet) -> str:
    """One JSON line of the optional prompt dump."""
    return json.dumps(
        {
            "image_id": image_id,
            "block_label": block_label,
            "run_index": run_index,
            "points": [[p.x, p.y] for p in prompt_set.points],
            "box": (
                [prompt_set.box.x_min, prompt_set.box.y_min, prompt_set.box.x_max, prompt_set.box.y_max]
                if prompt_set.box is not None
                else None
            ),
        },
        separators=(",", ":"),
    )


def write_prompt_dump(
    fh: IO[str], image_id: str, run_index: int, pairs: Sequence[tuple[GlyphMask, PromptSet]]
) -> None:
    for mask, prompt_set in pairs:
        fh.write(prompt_dump_line(image_id, mask.label or "", run_index, prompt_set) + "\n")
