"""IoU/Dice metrics, seeded multi-run evaluation, result tables, and overlays.

Each strategy is evaluated five times with run seeds base_seed + run_index;
reports carry per-run test-set means plus their mean and standard deviation.
Per-block strategies predict one mask per block and score the pixelwise union
against the image-level ground truth.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Sequence

import cv2
import numpy as np

from .corpus import (
    GlyphMask,
    ManifestRecord,
    load_image_rgb,
    load_mask_png,
    resize_pair,
    save_image_rgb,
)
from .errors import ConfigError, EmptySplit, GlyphsegError, ShapeMismatch
from .modelzoo import predict_mask
from .prompts import PromptSet, PromptStrategy, prompts_for_strategy, write_prompt_dump

log = logging.getLogger(__name__)

DEFAULT_N_RUNS = 5

MARKER_COLOR = (255, 165, 0)  # orange, as in the qualitative figures
PANEL_GUTTER = 4

# result-table ordering: baselines, then zero-shot, then fine-tuned
_MODEL_RANK = {"UNet": 0, "Autoencoder": 1, "SAM": 2, "Finetuned-SAM": 3}


# -- metrics ---------------------------------------------------------------------


def _bits(mask: GlyphMask | np.ndarray) -> np.ndarray:
    arr = mask.bits if isinstance(mask, GlyphMask) else np.asarray(mask)
    return arr.astype(bool)


def iou(pred: GlyphMask | np.ndarray, gt: GlyphMask | np.ndarray) -> float:
    """|P∩G| / |P∪G|; 1.0 when both masks are empty, 0.0 when exactly one is."""
    p, g = _bits(pred), _bits(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def dice_score(pred: GlyphMask | np.ndarray, gt: GlyphMask | np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); same empty-mask conventions as iou."""
    p, g = _bits(pred), _bits(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2 * int(np.logical_and(p, g).sum()) / total


@dataclass(frozen=True)
class MetricPair:
    iou: float
    dice: float

    def __post_init__(self) -> None:
        for name, value in (("iou", self.iou), ("dice", self.dice)):
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} {value} outside [0, 1]")


@dataclass(frozen=True)
class StrategyReport:
    """Per-run test-set means for one (model, strategy) cell, plus aggregates."""

    model_kind: str
    strategy: PromptStrategy | None
    per_run: tuple[MetricPair, ...]
    mean: MetricPair
    std: MetricPair
    base_seed: int

    def __post_init__(self) -> None:
        for name in ("iou", "dice"):
            recomputed = float(np.mean([getattr(m, name) for m in self.per_run]))
            if abs(recomputed - getattr(self.mean, name)) > 1e-9:
                raise ValueError(f"mean {name} inconsistent with per-run values")

    def strategy_label(self) -> str:
        return self.strategy.label() if self.strategy is not None else ""


# -- evaluation --------------------------------------------------------------------


def evaluate_once(
    model,
    records: Sequence[ManifestRecord],
    strategy: PromptStrategy | None,
    base_seed: int,
    run_index: int,
    *,
    data_root: str | Path,
    input_size: int,
    prompt_dump: IO[str] | None = None,
) -> MetricPair:
    """Unweighted mean IoU/Dice over a split for one seeded run.

    Prompt or prediction failures score the image 0 and are logged, never
    dropped, so means stay comparable across models.
    """
    if not records:
        raise EmptySplit("evaluation split is empty")
    prompt_free = getattr(model, "prompt_free", False)
    if not prompt_free and strategy is None:
        raise ConfigError("promptable models need a prompt strategy")

    data_root = Path(data_root)
    ious, dices = [], []
    for rec in records:
        image = load_image_rgb(_resolve(data_root, rec.image_path))
        gt = load_mask_png(_resolve(data_root, rec.mask_path))
        image, gt = resize_pair(image, gt, input_size)
        try:
            if prompt_free:
                pred = predict_mask(model, image, None) > 0.5
            else:
                pairs = prompts_for_strategy(
                    rec, strategy, base_seed, run_index, data_root=data_root, input_size=input_size
                )
                if prompt_dump is not None:
                    write_prompt_dump(prompt_dump, rec.image_id, run_index, pairs)
                pred = np.zeros((input_size, input_size), dtype=bool)
                for _, prompt_set in pairs:
                    pred |= predict_mask(model, image, prompt_set) > 0.5
        except GlyphsegError as exc:
            log.warning("image %s run %d scored 0: %s", rec.image_id, run_index, exc)
            ious.append(0.0)
            dices.append(0.0)
            continue
        ious.append(iou(pred, gt))
        dices.append(dice_score(pred, gt))
    return MetricPair(iou=float(np.mean(ious)), dice=float(np.mean(dices)))


def evaluate_averaged(
    model,
    records: Sequence[ManifestRecord],
    strategy: PromptStrategy | None,
    base_seed: int,
    n_runs: int = DEFAULT_N_RUNS,
    *,
    model_kind: str,
    data_root: str | Path,
    input_size: int,
    prompt_dump: IO[str] | None = None,
) -> StrategyReport:
    """Run evaluate_once for run_index 0..n_runs-1 and aggregate."""
    if n_runs < 1:
        raise ConfigError(f"n_runs must be >= 1, got {n_runs}")
    per_run = tuple(
        evaluate_once(
            model, records, strategy, base_seed, run_index,
            data_root=data_root, input_size=input_size, prompt_dump=prompt_dump,
        )
        for run_index in range(n_runs)
    )
    ious = [m.iou for m in per_run]
    dices = [m.dice for m in per_run]
    return StrategyReport(
        model_kind=model_kind,
        strategy=strategy,
        per_run=per_run,
        mean=MetricPair(iou=float(np.mean(ious)), dice=float(np.mean(dices))),
        std=MetricPair(iou=float(np.std(ious)), dice=float(np.std(dices))),
        base_seed=base_seed,
    )


def _resolve(data_root: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else data_root / p


# -- result tables ------------------------------------------------------------------


def _k_or_scale(strategy: PromptStrategy | None) -> str:
    if strategy is None:
        return ""
    return str(strategy.k) if strategy.kind == "points" else f"{strategy.scale:g}"


def _report_sort_key(report: StrategyReport):
    strat = report.strategy
    scope_rank = 0 if strat is None or strat.scope == "image_level" else 1
    model_rank = _MODEL_RANK.get(report.model_kind, len(_MODEL_RANK))
    kind_rank = 0 if strat is None or strat.kind == "points" else 1
    value = 0.0 if strat is None else (strat.k if strat.kind == "points" else strat.scale)
    return (scope_rank, model_rank, report.model_kind, kind_rank, value)


def emit_results_table(reports: Sequence[StrategyReport], path: str | Path) -> Path:
    """CSV of per-run rows plus mean/std aggregates, in benchmark row order."""
    if not reports:
        raise ConfigError("no reports to emit")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "strategy", "scope", "k_or_scale", "run_index", "iou", "dice"])
        for report in sorted(reports, key=_report_sort_key):
            strat = report.strategy
            base = [
                report.model_kind,
                report.strategy_label(),
                strat.scope if strat is not None else "",
                _k_or_scale(strat),
            ]
            for run_index, pair in enumerate(report.per_run):
                writer.writerow(base + [run_index, repr(pair.iou), repr(pair.dice)])
            writer.writerow(base + ["mean", repr(report.mean.iou), repr(report.mean.dice)])
            writer.writerow(base + ["std", repr(report.std.iou), repr(report.std.dice)])
    return path


# -- overlays -----------------------------------------------------------------------


def _mask_pane(mask: np.ndarray) -> np.ndarray:
    pane = (mask.astype(np.uint8) * 255)
    return np.stack([pane] * 3, axis=-1)


def _draw_prompts(pane: np.ndarray, prompt_set: PromptSet | None) -> np.ndarray:
    if prompt_set is None:
        return pane
    for point in prompt_set.points:
        x, y = int(round(point.x)), int(round(point.y))
        tri = np.array([[x, y - 4], [x - 4, y + 3], [x + 4, y + 3]], dtype=np.int32)
        cv2.fillConvexPoly(pane, tri, MARKER_COLOR)
    if prompt_set.box is not None:
        b = prompt_set.box
        cv2.rectangle(
            pane,
            (int(round(b.x_min)), int(round(b.y_min))),
            (int(round(b.x_max)) - 1, int(round(b.y_max)) - 1),
            MARKER_COLOR,
            1,
        )
    return pane


def render_overlay(
    image: np.ndarray,
    gt: GlyphMask | np.ndarray,
    pred: GlyphMask | np.ndarray,
    prompt_set: PromptSet | None,
    path: str | Path | None = None,
) -> np.ndarray:
    """Side-by-side panel: input with prompt markers, ground truth, prediction."""
    gt_b, pred_b = _bits(gt), _bits(pred)
    if image.shape[:2] != gt_b.shape or gt_b.shape != pred_b.shape:
        raise ShapeMismatch(
            f"inconsistent shapes: image {image.shape[:2]}, gt {gt_b.shape}, pred {pred_b.shape}"
        )
    panes = [
        _draw_prompts(np.ascontiguousarray(image.copy()), prompt_set),
        _mask_pane(gt_b),
        _mask_pane(pred_b),
    ]
    height = image.shape[0]
    gutter = np.full((height, PANEL_GUTTER, 3), 255, dtype=np.uint8)
    panel = np.concatenate([panes[0], gutter, panes[1], gutter, panes[2]], axis=1)
    if path is not None:
        save_image_rgb(path, panel)
    return panel
