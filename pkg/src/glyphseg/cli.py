"""Command-line entry point: ingest, split, synth, train, eval, visualize.

Configuration is a YAML tree merged as defaults <- --config file <- --set
overrides; unknown keys are rejected before anything is written, and every
run snapshots its resolved config into the output directory so artifacts are
reproducible from the snapshot alone. Exit codes: 0 success, 2 config error,
3 data error, 4 training/eval failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .corpus import (
    DatasetManifest,
    ManifestRecord,
    assign_splits,
    ingest_annotations,
    load_image_rgb,
    load_mask_png,
    read_manifest,
    resize_pair,
    write_manifest,
)
from .errors import ConfigError, DataError, GlyphsegError
from .evaluation import StrategyReport, emit_results_table, evaluate_averaged, render_overlay
from .modelzoo import (
    build_baseline,
    load_checkpoint_into,
    load_checkpoint_meta,
    load_pretrained_promptable,
    predict_mask,
)
from .prompts import PromptSet, PromptStrategy, prompts_for_strategy
from .synthcorpus import SynthConfig, generate_synthetic_corpus
from .training import TrainConfig, train_baseline, train_finetune

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
SNAPSHOT_NAME = "resolved_config.yaml"
ERROR_RECORD_NAME = "error.json"

COMMANDS = ("ingest", "split", "synth", "train", "eval", "visualize")

# subtrees whose keys are validated downstream (PromptStrategy / models schema)
_OPEN_PATHS = {
    "train.eval_prompt_protocol",
    "eval.strategies",
    "eval.models",
    "visualize.strategy",
}

_DEFAULT_STRATEGIES = [
    {"kind": "points", "k": 1, "scope": "image_level"},
    {"kind": "points", "k": 2, "scope": "image_level"},
    {"kind": "box", "scale": 0.5, "scope": "image_level"},
    {"kind": "box", "scale": 0.75, "scope": "image_level"},
]


def default_config() -> dict:
    return {
        "data": {"root": None, "input_size": 256},
        "ingest": {"annotations_dir": None, "seed": 0},
        "split": {"seed": 0},
        "synth": SynthConfig().to_mapping(),
        "train": {"model": "finetune", **TrainConfig().to_mapping()},
        "eval": {
            "split": "test",
            "base_seed": 0,
            "n_runs": 5,
            "strategies": copy.deepcopy(_DEFAULT_STRATEGIES),
            "models": [{"checkpoint": None}],
        },
        "visualize": {
            "split": "test",
            "n_images": 4,
            "base_seed": 0,
            "run_index": 0,
            "strategy": {"kind": "points", "k": 2, "scope": "image_level"},
        },
    }


# -- config resolution ------------------------------------------------------------


def _is_open(path: str) -> bool:
    return any(path == p or path.startswith(p + ".") for p in _OPEN_PATHS)


def _deep_merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        child = f"{path}.{key}" if path else str(key)
        if key not in base and not _is_open(path or child):
            raise ConfigError(f"unknown config key {child!r}")
        if key in base and isinstance(base[key], dict) and isinstance(value, dict):
            _deep_merge(base[key], value, child)
        else:
            base[key] = copy.deepcopy(value)


def _apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad --set key {dotted!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable --set value {raw!r}: {exc}") from exc
    node = config
    for i, key in enumerate(keys[:-1]):
        prefix = ".".join(keys[: i + 1])
        if key not in node or not isinstance(node[key], dict):
            if _is_open(prefix):
                node = node.setdefault(key, {})
                continue
            raise ConfigError(f"unknown config key {prefix!r}")
        node = node[key]
    leaf = keys[-1]
    if leaf not in node and not _is_open(dotted.strip()) and not _is_open(".".join(keys[:-1])):
        raise ConfigError(f"unknown config key {dotted.strip()!r}")
    node[leaf] = value


def resolve_config(config_path: str | None, overrides: list[str]) -> dict:
    """defaults <- YAML file <- --set overrides, rejecting unknown keys."""
    config = default_config()
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparseable config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
        _deep_merge(config, loaded)
    for assignment in overrides:
        _apply_override(config, assignment)
    return config


# -- command helpers -----------------------------------------------------------------


def _require(value, dotted: str):
    if value is None:
        raise ConfigError(f"config key {dotted!r} is required for this command")
    return value


def _read_corpus(cfg: dict) -> tuple[Path, DatasetManifest]:
    root = Path(_require(cfg["data"]["root"], "data.root"))
    return root, read_manifest(root / MANIFEST_NAME)


def _rebase_records(records: list[ManifestRecord], src_root: Path, dst_root: Path) -> list[ManifestRecord]:
    out = []
    for rec in records:
        out.append(
            dataclasses.replace(
                rec,
                image_path=os.path.relpath((src_root / rec.image_path).resolve(), dst_root),
                mask_path=os.path.relpath((src_root / rec.mask_path).resolve(), dst_root),
            )
        )
    return out


def _build_eval_model(checkpoint: str | None, args) -> tuple[object, str]:
    """Model plus its result-table label, derived from the checkpoint sidecar."""
    if checkpoint is None:
        return load_pretrained_promptable(args.weights, args.variant), "SAM"
    meta = load_checkpoint_meta(checkpoint)
    if meta.model_kind == "finetune":
        model = load_pretrained_promptable(args.weights, args.variant)
        label = "Finetuned-SAM"
    elif meta.model_kind == "unet":
        model = build_baseline("unet")
        label = "UNet"
    elif meta.model_kind == "autoencoder":
        model = build_baseline("autoencoder")
        label = "Autoencoder"
    else:
        raise DataError(f"checkpoint {checkpoint} has unknown model_kind {meta.model_kind!r}")
    load_checkpoint_into(model, checkpoint)
    return model, label


# -- commands ----------------------------------------------------------------------


def _cmd_ingest(cfg: dict, args) -> None:
    ann_dir = _require(cfg["ingest"]["annotations_dir"], "ingest.annotations_dir")
    manifest = ingest_annotations(ann_dir, args.out, seed=int(cfg["ingest"]["seed"]))
    sizes = {s: len(manifest.for_split(s)) for s in ("train", "val", "test")}
    print(f"ingested {len(manifest.records)} images; splits {sizes}")


def _cmd_split(cfg: dict, args) -> None:
    root, manifest = _read_corpus(cfg)
    out = Path(args.out)
    records = _rebase_records(manifest.records, root, out)
    manifest = dataclasses.replace(manifest, records=assign_splits(records, int(cfg["split"]["seed"])))
    write_manifest(manifest, out / MANIFEST_NAME)
    sizes = {s: len(manifest.for_split(s)) for s in ("train", "val", "test")}
    print(f"reassigned splits with seed {cfg['split']['seed']}: {sizes}")


def _cmd_synth(cfg: dict, args) -> None:
    config = SynthConfig.from_mapping(cfg["synth"])
    manifest = generate_synthetic_corpus(config, args.out)
    sizes = {s: len(manifest.for_split(s)) for s in ("train", "val", "test")}
    print(f"generated {len(manifest.records)} synthetic images; splits {sizes}")


def _cmd_train(cfg: dict, args) -> None:
    root, manifest = _read_corpus(cfg)
    train_cfg = dict(cfg["train"])
    model_kind = str(train_cfg.pop("model"))
    config = TrainConfig.from_mapping(train_cfg)
    if model_kind == "finetune":
        model = load_pretrained_promptable(args.weights, args.variant)
        best, stats = train_finetune(model, manifest, config, data_root=root, out_dir=args.out)
    elif model_kind in ("unet", "autoencoder"):
        model = build_baseline(model_kind, input_size=config.input_size, seed=config.seed)
        best, stats = train_baseline(model, manifest, config, data_root=root, out_dir=args.out)
    else:
        raise ConfigError(f"train.model must be finetune, unet, or autoencoder, got {model_kind!r}")
    best_dice = max(s.val_dice for s in stats)
    print(f"trained {model_kind} for {len(stats)} epochs; best val dice {best_dice:.4f} -> {best}")


def _cmd_eval(cfg: dict, args) -> None:
    root, manifest = _read_corpus(cfg)
    split = str(cfg["eval"]["split"])
    records = manifest.for_split(split)
    strategies = [PromptStrategy.from_mapping(m) for m in cfg["eval"]["strategies"]]
    model_entries = cfg["eval"]["models"]
    if args.checkpoint:
        model_entries = [{"checkpoint": args.checkpoint}]
    out = Path(args.out)
    reports: list[StrategyReport] = []
    with (out / "prompts.jsonl").open("w") as dump:
        for entry in model_entries:
            unknown = set(entry) - {"checkpoint"}
            if unknown:
                raise ConfigError(f"unknown eval.models keys: {sorted(unknown)}")
            model, label = _build_eval_model(entry.get("checkpoint"), args)
            if getattr(model, "prompt_free", False):
                reports.append(
                    evaluate_averaged(
                        model, records, None, int(cfg["eval"]["base_seed"]),
                        int(cfg["eval"]["n_runs"]), model_kind=label, data_root=root,
                        input_size=int(cfg["data"]["input_size"]),
                    )
                )
                continue
            for strategy in strategies:
                reports.append(
                    evaluate_averaged(
                        model, records, strategy, int(cfg["eval"]["base_seed"]),
                        int(cfg["eval"]["n_runs"]), model_kind=label, data_root=root,
                        input_size=int(cfg["data"]["input_size"]), prompt_dump=dump,
                    )
                )
    table = emit_results_table(reports, out / "results.csv")
    print(f"evaluated {len(reports)} (model, strategy) cells on {len(records)} {split} images -> {table}")


def _cmd_visualize(cfg: dict, args) -> None:
    root, manifest = _read_corpus(cfg)
    viz = cfg["visualize"]
    records = manifest.for_split(str(viz["split"]))[: int(viz["n_images"])]
    if not records:
        raise DataError(f"no records in split {viz['split']!r}")
    strategy = PromptStrategy.from_mapping(viz["strategy"])
    model, label = _build_eval_model(args.checkpoint, args)
    input_size = int(cfg["data"]["input_size"])
    run_index = int(viz["run_index"])
    out = Path(args.out)
    for rec in records:
        image = load_image_rgb(root / rec.image_path if not Path(rec.image_path).is_absolute() else rec.image_path)
        gt = load_mask_png(root / rec.mask_path if not Path(rec.mask_path).is_absolute() else rec.mask_path)
        image, gt = resize_pair(image, gt, input_size)
        if getattr(model, "prompt_free", False):
            pred = predict_mask(model, image, None) > 0.5
            shown: PromptSet | None = None
        else:
            pairs = prompts_for_strategy(
                rec, strategy, int(viz["base_seed"]), run_index, data_root=root, input_size=input_size
            )
            pred = np.zeros((input_size, input_size), dtype=bool)
            points: tuple = ()
            box = None
            for _, prompt_set in pairs:
                pred |= predict_mask(model, image, prompt_set) > 0.5
                points += prompt_set.points
                box = box or prompt_set.box
            shown = PromptSet(points=points, box=box)
        name = f"{rec.image_id}_{label}_{strategy.slug()}_{run_index}.png"
        render_overlay(image, gt, pred, shown, out / name)
    print(f"wrote {len(records)} overlays to {out}")


_COMMANDS = {
    "ingest": _cmd_ingest,
    "split": _cmd_split,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "visualize": _cmd_visualize,
}


# -- entry point --------------------------------------------------------------------


def _parse_args(argv) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="glyphseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} step")
        cmd.add_argument("--config", default=None, help="YAML config file")
        cmd.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="KEY=VALUE", help="dotted config override, repeatable")
        cmd.add_argument("--out", required=True, help="output directory for this run")
        cmd.add_argument("--weights", default=None, help="pretrained weight file (vit_base)")
        cmd.add_argument("--checkpoint", default=None, help="trained checkpoint to evaluate")
        cmd.add_argument("--variant", default="vit_base", choices=["vit_base", "stub"],
                         help="promptable backbone variant")
    return parser.parse_args(argv)


def _emit_error(exc: GlyphsegError, command: str, out_dir: Path | None) -> None:
    record = {
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": exc.exit_code,
        "command": command,
        "partial_outputs": out_dir is not None,
    }
    print(json.dumps(record), file=sys.stderr)
    if out_dir is not None and out_dir.is_dir():
        (out_dir / ERROR_RECORD_NAME).write_text(json.dumps(record, indent=2))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides)
    except GlyphsegError as exc:
        _emit_error(exc, args.command, None)
        return exc.exit_code

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / SNAPSHOT_NAME).write_text(yaml.safe_dump(cfg, sort_keys=True))
    try:
        _COMMANDS[args.command](cfg, args)
    except GlyphsegError as exc:
        _emit_error(exc, args.command, out_dir)
        return exc.exit_code
    return 0


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
