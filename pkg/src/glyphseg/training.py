"""Combined Dice + cross-entropy objective and seeded training loops.

Fine-tuning trains only the mask decoder of a promptable segmenter (encoders
frozen), sampling fresh point/box prompts from ground truth every epoch.
Baselines train prompt-free on the same loss. Model selection keeps the
checkpoint with the highest validation Dice under a fixed-seed prompt
protocol; ties go to the earlier epoch.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import hashlib

import numpy as np
import torch

from .corpus import CorpusItem, DatasetManifest, load_corpus_items
from .errors import ConfigError, EmptySplit, NonFiniteLoss, ShapeMismatch
from .evaluation import dice_score, iou
from .modelzoo import (
    CheckpointMeta,
    copy_checkpoint,
    freeze_encoders,
    save_checkpoint,
    trainable_parameters,
)
from .prompts import PromptSet, PromptStrategy, sample_prompt_set
from .seeding import stable_hash

log = logging.getLogger(__name__)

CE_CLAMP_EPS = 1e-7
DICE_SMOOTH_EPS = 1e-6

ADAM_BETAS = (0.9, 0.999)


# -- losses -------------------------------------------------------------------


def _check_shapes(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def cross_entropy_loss(pred_probs: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over pixels, probabilities clamped to [eps, 1-eps]."""
    _check_shapes(pred_probs, target_mask)
    p = pred_probs.clamp(CE_CLAMP_EPS, 1.0 - CE_CLAMP_EPS)
    t = target_mask.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def dice_loss(pred_probs: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Soft Dice loss, 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), global sums."""
    _check_shapes(pred_probs, target_mask)
    p = pred_probs
    t = target_mask.to(p.dtype)
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + DICE_SMOOTH_EPS) / (p.sum() + t.sum() + DICE_SMOOTH_EPS)


@dataclass(frozen=True)
class LossWeights:
    """Term weights in L = alpha * L_CE + beta * L_Dice; equal by default."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError(f"loss weights must be >= 0 with a positive sum, got {self}")

    def to_mapping(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_mapping(cls, mapping: dict) -> "LossWeights":
        unknown = set(mapping) - {"alpha", "beta"}
        if unknown:
            raise ConfigError(f"unknown loss keys: {sorted(unknown)}")
        return cls(alpha=float(mapping.get("alpha", 1.0)), beta=float(mapping.get("beta", 1.0)))


def combined_loss(
    pred_probs: torch.Tensor, target_mask: torch.Tensor, weights: LossWeights = LossWeights()
) -> torch.Tensor:
    return weights.alpha * cross_entropy_loss(pred_probs, target_mask) + weights.beta * dice_loss(
        pred_probs, target_mask
    )


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters: 300 epochs, lr 1e-3, batch 6, Adam, CE+Dice."""

    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 6
    optimizer: str = "adam"
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    input_size: int = 256
    select_metric: str = "dice"
    eval_prompt_protocol: PromptStrategy = field(
        default_factory=lambda: PromptStrategy(kind="points", k=1, scope="image_level")
    )

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.input_size < 1:
            raise ConfigError("epochs, batch_size, and input_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.select_metric != "dice":
            raise ConfigError(f"unsupported select_metric {self.select_metric!r}")

    def to_mapping(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "seed": self.seed,
            "loss": self.loss.to_mapping(),
            "input_size": self.input_size,
            "select_metric": self.select_metric,
            "eval_prompt_protocol": self.eval_prompt_protocol.to_mapping(),
        }

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {
            "epochs", "learning_rate", "batch_size", "optimizer", "seed",
            "loss", "input_size", "select_metric", "eval_prompt_protocol",
        }
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kwargs: dict = {}
        for key in ("epochs", "batch_size", "seed", "input_size"):
            if key in mapping:
                kwargs[key] = int(mapping[key])
        if "learning_rate" in mapping:
            kwargs["learning_rate"] = float(mapping["learning_rate"])
        for key in ("optimizer", "select_metric"):
            if key in mapping:
                kwargs[key] = str(mapping[key])
        if "loss" in mapping:
            kwargs["loss"] = LossWeights.from_mapping(mapping["loss"])
        if "eval_prompt_protocol" in mapping:
            kwargs["eval_prompt_protocol"] = PromptStrategy.from_mapping(mapping["eval_prompt_protocol"])
        return cls(**kwargs)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_mapping(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class EpochStats:
    epoch: int
    mean_train_loss: float
    val_iou: float
    val_dice: float
    wall_clock_s: float

    def __post_init__(self) -> None:
        if self.mean_train_loss < 0:
            raise ValueError(f"negative train loss {self.mean_train_loss}")
        for name in ("val_iou", "val_dice"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} {value} outside [0, 1]")


# -- loop internals -----------------------------------------------------------------


def _image_batch(items: Sequence[CorpusItem], indices: Sequence[int]) -> torch.Tensor:
    stack = np.stack([items[i].image for i in indices]).astype(np.float32)
    return torch.from_numpy(stack).permute(0, 3, 1, 2)


def _target_batch(items: Sequence[CorpusItem], indices: Sequence[int]) -> torch.Tensor:
    stack = np.stack([items[i].mask.bits for i in indices]).astype(np.float32)
    return torch.from_numpy(stack)[:, None]


def _prompt_batch(prompt_sets: Sequence[PromptSet]) -> dict[str, torch.Tensor | None]:
    coords = labels = boxes = None
    if prompt_sets[0].points:
        coords = torch.tensor(
            [[[p.x, p.y] for p in ps.points] for ps in prompt_sets], dtype=torch.float32
        )
        labels = torch.ones(coords.shape[:2], dtype=torch.int64)
    if prompt_sets[0].box is not None:
        boxes = torch.tensor(
            [[ps.box.x_min, ps.box.y_min, ps.box.x_max, ps.box.y_max] for ps in prompt_sets],
            dtype=torch.float32,
        )
    return {"point_coords": coords, "point_labels": labels, "boxes": boxes}


def _batches(order: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _training_strategy(config: TrainConfig) -> PromptStrategy:
    """Training prompts reuse the validation protocol's kind/k/scale at image level."""
    strategy = config.eval_prompt_protocol
    if strategy.scope != "image_level":
        log.info("training prompts are image-level; coercing scope from %s", strategy.scope)
        strategy = replace(strategy, scope="image_level")
    return strategy


def _validate(
    model, items: Sequence[CorpusItem], config: TrainConfig, promptable: bool
) -> tuple[float, float]:
    """Mean IoU/Dice over the validation split at threshold 0.5, fixed prompt seed."""
    strategy = _training_strategy(config)
    was_training = model.training
    model.eval()
    ious, dices = [], []
    with torch.no_grad():
        for indices in _batches(np.arange(len(items)), config.batch_size):
            images = _image_batch(items, indices)
            if promptable:
                sets = [
                    sample_prompt_set(
                        items[i].mask, strategy, stable_hash(config.seed, "val-prompt", items[i].image_id)
                    )
                    for i in indices
                ]
                probs = model(images, **_prompt_batch(sets))
            else:
                probs = model(images)
            preds = (probs[:, 0].cpu().numpy() > 0.5).astype(np.uint8)
            for row, i in enumerate(indices):
                ious.append(iou(preds[row], items[i].mask.bits))
                dices.append(dice_score(preds[row], items[i].mask.bits))
    model.train(was_training)
    return float(np.mean(ious)), float(np.mean(dices))


def _train_loop(
    model,
    items_train: Sequence[CorpusItem],
    items_val: Sequence[CorpusItem],
    config: TrainConfig,
    out_dir: str | Path,
    *,
    model_kind: str,
    promptable: bool,
) -> tuple[Path, list[EpochStats]]:
    if not items_train:
        raise EmptySplit("train split is empty")
    if not items_val:
        raise EmptySplit("val split is empty")
    model_size = getattr(model, "input_size", config.input_size)
    if model_size != config.input_size:
        raise ConfigError(
            f"config input_size {config.input_size} != model input_size {model_size}"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "epochs.jsonl"
    log_path.write_text("")

    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(
        trainable_parameters(model), lr=config.learning_rate, betas=ADAM_BETAS
    )
    strategy = _training_strategy(config)
    cfg_hash = config_hash(config)
    stats: list[EpochStats] = []
    best_dice = -1.0
    last_path = out_dir / "last.pt"
    best_path = out_dir / "best.pt"

    for epoch in range(config.epochs):
        started = time.perf_counter()
        model.train()
        order = np.random.default_rng(stable_hash(config.seed, "order", epoch)).permutation(
            len(items_train)
        )
        losses = []
        for batch_no, indices in enumerate(_batches(order, config.batch_size)):
            images = _image_batch(items_train, indices)
            targets = _target_batch(items_train, indices)
            if promptable:
                sets = [
                    sample_prompt_set(
                        items_train[i].mask,
                        strategy,
                        stable_hash(config.seed, "train-prompt", epoch, items_train[i].image_id),
                    )
                    for i in indices
                ]
                probs = model(images, **_prompt_batch(sets))
            else:
                probs = model(images)
            loss = combined_loss(probs, targets, config.loss)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss {loss.item()} at epoch {epoch} batch {batch_no}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        val_iou, val_dice = _validate(model, items_val, config, promptable)
        entry = EpochStats(
            epoch=epoch,
            mean_train_loss=float(np.mean(losses)),
            val_iou=val_iou,
            val_dice=val_dice,
            wall_clock_s=time.perf_counter() - started,
        )
        stats.append(entry)
        with log_path.open("a") as fh:
            fh.write(json.dumps(asdict(entry)) + "\n")

        meta = CheckpointMeta(
            model_kind=model_kind,
            epoch=epoch,
            val_dice=val_dice,
            config_hash=cfg_hash,
            encoder_frozen=bool(getattr(model, "encoders_frozen", False)),
        )
        save_checkpoint(model, meta, last_path)
        # strict improvement only, so equal scores keep the earlier epoch
        if val_dice > best_dice:
            best_dice = val_dice
            copy_checkpoint(last_path, best_path)
            log.info("epoch %d: new best val_dice %.4f", epoch, val_dice)

    return best_path, stats


# -- entry points ----------------------------------------------------------------------


def train_finetune(
    model,
    manifest: DatasetManifest,
    config: TrainConfig,
    *,
    data_root: str | Path,
    out_dir: str | Path,
) -> tuple[Path, list[EpochStats]]:
    """Fine-tune the mask decoder with frozen encoders; returns (best checkpoint, stats)."""
    freeze_encoders(model)
    items_train = load_corpus_items(manifest.for_split("train"), data_root, config.input_size)
    items_val = load_corpus_items(manifest.for_split("val"), data_root, config.input_size)
    return _train_loop(
        model, items_train, items_val, config, out_dir, model_kind="finetune", promptable=True
    )


def train_baseline(
    model,
    manifest: DatasetManifest,
    config: TrainConfig,
    *,
    data_root: str | Path,
    out_dir: str | Path,
) -> tuple[Path, list[EpochStats]]:
    """Train a prompt-free baseline under the same loss and selection rule."""
    log.info("baseline %s ignores eval_prompt_protocol %s", model.kind, config.eval_prompt_protocol)
    items_train = load_corpus_items(manifest.for_split("train"), data_root, config.input_size)
    items_val = load_corpus_items(manifest.for_split("val"), data_root, config.input_size)
    return _train_loop(
        model, items_train, items_val, config, out_dir, model_kind=model.kind, promptable=False
    )
