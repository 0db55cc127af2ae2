"""Acceptance gate: one printed pass/fail line per criterion.

Criteria 7 and 8 need the published ViT-B weights plus the optional
segment-anything package and hours of compute; they skip with an explicit
notice unless GLYPHSEG_RUN_FULL=1 and the weights are available.
"""

import csv
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from glyphseg.corpus import PolygonAnnotation, rasterize_polygon, split_dataset
from glyphseg.evaluation import dice_score, evaluate_once, evaluate_averaged, iou
from glyphseg.modelzoo import (
    build_baseline,
    encoder_checksums,
    load_checkpoint_into,
    load_pretrained_promptable,
    resolve_weights_path,
)
from glyphseg.prompts import PromptStrategy
from glyphseg.synthcorpus import SynthConfig, generate_synthetic_corpus
from glyphseg.training import (
    LossWeights,
    TrainConfig,
    combined_loss,
    cross_entropy_loss,
    dice_loss,
    train_baseline,
    train_finetune,
)


_CAPMAN = None


@pytest.fixture(autouse=True, scope="module")
def _capture_bypass(request):
    """Let criterion lines through pytest's fd-level output capture."""
    global _CAPMAN
    _CAPMAN = request.config.pluginmanager.getplugin("capturemanager")
    yield
    _CAPMAN = None


def _emit(line: str) -> None:
    if _CAPMAN is not None:
        with _CAPMAN.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, file=sys.__stdout__, flush=True)


def _report(num: int, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    _emit(f"[criterion {num:02d}] {status} {name}{suffix}")


def _skip(num: int, name: str, reason: str) -> None:
    _emit(f"[criterion {num:02d}] SKIP {name} ({reason})")
    pytest.skip(reason)


# -- criterion 1: metric oracles -----------------------------------------------------


def test_criterion_01_metric_oracles():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    exact = True
    identity_err = 0.0
    for _ in range(200):
        pred = rng.random((16, 16)) > rng.uniform(0.1, 0.9)
        gt = rng.random((16, 16)) > rng.uniform(0.1, 0.9)
        inter = int(np.logical_and(pred, gt).sum())
        union = int(np.logical_or(pred, gt).sum())
        denom = int(pred.sum()) + int(gt.sum())
        want_iou = 1.0 if union == 0 else inter / union
        want_dice = 1.0 if denom == 0 else 2.0 * inter / denom
        got_iou = iou(pred, gt)
        got_dice = dice_score(pred, gt)
        exact = exact and got_iou == want_iou and got_dice == want_dice
        identity_err = max(identity_err, abs(got_dice - 2.0 * got_iou / (1.0 + got_iou)))
    elapsed = time.monotonic() - start
    ok = exact and identity_err < 1e-12 and elapsed < 5.0
    _report(1, "metric oracles", ok,
            f"200 pairs exact={exact}, identity err {identity_err:.2e}, {elapsed:.2f}s")
    assert ok


# -- criterion 2: rasterization oracle -----------------------------------------------


def _oracle_even_odd(points, height, width):
    """Independent scan: crossing parity of a rightward ray from each nudged center."""
    cx = sum(p[0] for p in points) / len(points)
    cy = sum(p[1] for p in points) / len(points)
    eps = 1e-9
    bits = np.zeros((height, width), dtype=np.uint8)
    for i in range(height):
        for j in range(width):
            px = j + 0.5 + (eps if cx > j + 0.5 else -eps)
            py = i + 0.5 + (eps if cy > i + 0.5 else -eps)
            inside = False
            n = len(points)
            for a in range(n):
                x1, y1 = points[a]
                x2, y2 = points[(a + 1) % n]
                if (y1 > py) != (y2 > py):
                    x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                    if px < x_at:
                        inside = not inside
            bits[i, j] = inside
    return bits


def test_criterion_02_rasterization_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(202)
    mismatches = 0
    for k in range(100):
        n = int(rng.integers(3, 12))
        cx, cy = rng.uniform(6, 26, 2)
        radius = rng.uniform(3, 12)
        step = 2.0 * math.pi / n
        angles = (np.arange(n) + rng.uniform(0.0, 0.4, n)) * step
        radii = rng.uniform(0.4, 1.0, n) * radius
        pts = tuple(
            (float(cx + r * math.cos(a)), float(cy + r * math.sin(a)))
            for r, a in zip(radii, angles)
        )
        poly = PolygonAnnotation(label=f"p{k}", points=pts)
        mask = rasterize_polygon(poly, 32, 32)
        clamped = tuple(
            (min(max(x, 0.0), 32.0), min(max(y, 0.0), 32.0)) for x, y in pts
        )
        oracle = _oracle_even_odd(clamped, 32, 32)
        if not np.array_equal(mask.bits, oracle):
            mismatches += 1
    elapsed = time.monotonic() - start
    ok = mismatches == 0 and elapsed < 10.0
    _report(2, "rasterization oracle", ok, f"100 polygons, {mismatches} mismatches, {elapsed:.2f}s")
    assert ok


# -- criterion 3: loss correctness ---------------------------------------------------


def test_criterion_03_loss_correctness():
    pred_half = torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64)
    target = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    target[0, 0, :2] = 1.0  # 8 foreground pixels

    ce_err = abs(cross_entropy_loss(pred_half, target).item() - math.log(2.0))
    dice_err = abs(dice_loss(pred_half, target).item() - 0.5)

    rng = np.random.default_rng(303)
    pred = torch.tensor(rng.random((2, 1, 8, 8)))
    tgt = torch.tensor((rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64))
    weights = LossWeights(alpha=0.6, beta=1.7)
    combined_err = abs(
        combined_loss(pred, tgt, weights).item()
        - (0.6 * cross_entropy_loss(pred, tgt).item() + 1.7 * dice_loss(pred, tgt).item())
    )

    model = load_pretrained_promptable(variant="stub", seed=0).double()
    image = torch.rand(1, 3, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(3)) * 255
    boxes = torch.tensor([[8.0, 10.0, 44.0, 50.0]], dtype=torch.float64)
    grad_target = torch.zeros(1, 1, 64, 64, dtype=torch.float64)
    grad_target[0, 0, 10:50, 8:44] = 1.0

    def forward():
        return combined_loss(model(image, boxes=boxes), grad_target, LossWeights())

    loss = forward()
    model.zero_grad()
    loss.backward()
    param = dict(model.named_parameters())["mask_decoder.out_mlp.2.weight"]
    flat_idx = int(param.grad.abs().argmax())
    analytic = param.grad.flatten()[flat_idx].item()
    h = 1e-3
    with torch.no_grad():
        base = param.flatten()[flat_idx].item()
        param.flatten()[flat_idx] = base + h
        plus = forward().item()
        param.flatten()[flat_idx] = base - h
        minus = forward().item()
        param.flatten()[flat_idx] = base
    numeric = (plus - minus) / (2.0 * h)
    grad_rel = abs(analytic - numeric) / max(abs(numeric), 1e-12)

    ok = ce_err < 1e-6 and dice_err < 1e-6 and combined_err < 1e-6 and grad_rel < 1e-3
    _report(3, "loss correctness", ok,
            f"ce err {ce_err:.2e}, dice err {dice_err:.2e}, "
            f"combined err {combined_err:.2e}, grad rel {grad_rel:.2e}")
    assert ok


# -- criterion 4: frozen-encoder invariance -------------------------------------------


def test_criterion_04_frozen_encoder_invariance(tmp_path, tiny_corpus):
    start = time.monotonic()
    root, manifest = tiny_corpus
    model = load_pretrained_promptable(variant="stub", seed=0)
    before = encoder_checksums(model)
    # 6 train images, batch 6 -> one optimizer step per epoch -> 20 steps
    config = TrainConfig(epochs=20, batch_size=6, input_size=64, seed=0)
    train_finetune(model, manifest, config, data_root=root, out_dir=tmp_path)
    after = encoder_checksums(model)
    elapsed = time.monotonic() - start

    frozen = (
        before["image_encoder"] == after["image_encoder"]
        and before["prompt_encoder"] == after["prompt_encoder"]
    )
    moved = before["mask_decoder"] != after["mask_decoder"]
    ok = frozen and moved and elapsed < 120.0
    _report(4, "frozen-encoder invariance", ok,
            f"encoders frozen={frozen}, decoder moved={moved}, {elapsed:.1f}s")
    assert ok


# -- criterion 5: split exactness -----------------------------------------------------


def test_criterion_05_split_exactness():
    sizes_ok = True
    for seed in range(10):
        sizes_ok = sizes_ok and split_dataset(117, seed).sizes() == (75, 19, 23)

    rng = np.random.default_rng(505)
    partition_ok = True
    for _ in range(50):
        n = int(rng.integers(3, 400))
        seed = int(rng.integers(0, 2**31))
        split = split_dataset(n, seed)
        merged = sorted(split.train + split.val + split.test)
        partition_ok = partition_ok and merged == list(range(n))
        partition_ok = partition_ok and not (
            set(split.train) & set(split.val)
            or set(split.train) & set(split.test)
            or set(split.val) & set(split.test)
        )

    ok = sizes_ok and partition_ok
    _report(5, "split exactness", ok,
            f"117 -> (75, 19, 23)={sizes_ok}, 50 partitions disjoint/exhaustive={partition_ok}")
    assert ok


# -- criterion 6: pipeline determinism ------------------------------------------------


def _cli(*args: str) -> None:
    subprocess.run(
        [sys.executable, "-m", "glyphseg.cli", *args],
        check=True, capture_output=True, text=True,
    )


def _run_pipeline(base: Path) -> tuple[Path, Path, Path]:
    corpus = base / "corpus"
    run = base / "run"
    evaldir = base / "eval"
    _cli("synth", "--out", str(corpus),
         "--set", "synth.n_images=12", "--set", "synth.image_size=64",
         "--set", "synth.blocks_per_image=[1, 3]", "--set", "synth.clutter_shapes=2",
         "--set", "synth.seed=21")
    _cli("train", "--out", str(run), "--variant", "stub",
         "--set", f"data.root={corpus}", "--set", "data.input_size=64",
         "--set", "train.epochs=10", "--set", "train.input_size=64",
         "--set", "train.seed=7")
    _cli("eval", "--out", str(evaldir), "--variant", "stub",
         "--set", f"data.root={corpus}", "--set", "data.input_size=64",
         "--set", "eval.n_runs=2",
         "--set", f"eval.models=[{{checkpoint: null}}, {{checkpoint: {run / 'best.pt'}}}]")
    return corpus, run, evaldir


@pytest.fixture(scope="module")
def determinism_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("determinism")
    first = _run_pipeline(base / "first")
    second = _run_pipeline(base / "second")
    return first, second


def test_criterion_06_pipeline_determinism(determinism_runs):
    start = time.monotonic()
    (corpus1, run1, eval1), (_, _, eval2) = determinism_runs

    rows1 = list(csv.reader((eval1 / "results.csv").open()))
    rows2 = list(csv.reader((eval2 / "results.csv").open()))
    csv_ok = len(rows1) == len(rows2) and rows1[0] == rows2[0]
    max_cell_diff = 0.0
    for r1, r2 in zip(rows1[1:], rows2[1:]):
        csv_ok = csv_ok and r1[:5] == r2[:5]
        for c1, c2 in zip(r1[5:], r2[5:]):
            diff = abs(float(c1) - float(c2))
            max_cell_diff = max(max_cell_diff, diff)
    csv_ok = csv_ok and max_cell_diff <= 1e-6

    dumps_ok = (eval1 / "prompts.jsonl").read_bytes() == (eval2 / "prompts.jsonl").read_bytes()
    dumps_ok = dumps_ok and (eval1 / "prompts.jsonl").stat().st_size > 0

    elapsed = time.monotonic() - start
    ok = csv_ok and dumps_ok and elapsed < 600.0
    _report(6, "pipeline determinism", ok,
            f"csv max cell diff {max_cell_diff:.2e}, dumps identical={dumps_ok}")
    assert ok


# -- criteria 7/8: real-weight directional reproductions ------------------------------


def _full_run_gate() -> str | None:
    if os.environ.get("GLYPHSEG_RUN_FULL") != "1":
        return "set GLYPHSEG_RUN_FULL=1 to enable"
    weights = os.environ.get("GLYPHSEG_SAM_WEIGHTS") or resolve_weights_path(None)
    if not weights or not Path(weights).is_file():
        return "ViT-B weights not found (GLYPHSEG_SAM_WEIGHTS or GLYPHSEG_CACHE)"
    try:
        import segment_anything  # noqa: F401
    except ImportError:
        return "segment-anything package not installed"
    return None


@pytest.fixture(scope="module")
def full_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("full_corpus")
    config = SynthConfig(n_images=117, image_size=256, blocks_per_image=(2, 6), seed=0)
    manifest = generate_synthetic_corpus(config, root)
    return root, manifest


def test_criterion_07_finetuning_improves_dice(tmp_path_factory, request):
    reason = _full_run_gate()
    if reason:
        _skip(7, "fine-tuning improves dice", reason)
    root, manifest = request.getfixturevalue("full_corpus")
    weights = os.environ.get("GLYPHSEG_SAM_WEIGHTS")
    out = tmp_path_factory.mktemp("finetune_run")

    zero_shot = load_pretrained_promptable(weights, "vit_base")
    model = load_pretrained_promptable(weights, "vit_base")
    epochs = int(os.environ.get("GLYPHSEG_FULL_EPOCHS", "300"))
    config = TrainConfig(epochs=epochs)
    best, _ = train_finetune(model, manifest, config, data_root=root, out_dir=out)
    finetuned = load_checkpoint_into(load_pretrained_promptable(weights, "vit_base"), best)

    records = manifest.for_split("test")
    deltas = {}
    ok = True
    for k in (1, 2):
        strategy = PromptStrategy(kind="points", k=k)
        zs = evaluate_averaged(zero_shot, records, strategy, 0, 5,
                               model_kind="SAM", data_root=root, input_size=256)
        ft = evaluate_averaged(finetuned, records, strategy, 0, 5,
                               model_kind="Finetuned-SAM", data_root=root, input_size=256)
        deltas[k] = ft.mean.dice - zs.mean.dice
        ok = ok and deltas[k] >= 0.10
    _report(7, "fine-tuning improves dice", ok,
            f"delta dice k=1 {deltas[1]:+.3f}, k=2 {deltas[2]:+.3f} (threshold +0.10)")
    assert ok


def test_criterion_08_per_block_improves_zero_shot(request):
    reason = _full_run_gate()
    if reason:
        _skip(8, "per-block prompts improve zero-shot", reason)
    root, manifest = request.getfixturevalue("full_corpus")
    weights = os.environ.get("GLYPHSEG_SAM_WEIGHTS")
    zero_shot = load_pretrained_promptable(weights, "vit_base")
    records = manifest.for_split("test")

    image_level = evaluate_averaged(
        zero_shot, records, PromptStrategy(kind="points", k=2), 0, 5,
        model_kind="SAM", data_root=root, input_size=256,
    )
    per_block = evaluate_averaged(
        zero_shot, records, PromptStrategy(kind="points", k=2, scope="per_block"), 0, 5,
        model_kind="SAM", data_root=root, input_size=256,
    )
    delta = per_block.mean.dice - image_level.mean.dice
    ok = delta >= 0.05
    _report(8, "per-block prompts improve zero-shot", ok,
            f"delta dice {delta:+.3f} (threshold +0.05)")
    assert ok


# -- criterion 9: baseline sanity ------------------------------------------------------


def test_criterion_09_baseline_sanity(tmp_path):
    corpus_root = tmp_path / "corpus"
    config = SynthConfig(n_images=28, image_size=256, blocks_per_image=(2, 5), seed=9)
    manifest = generate_synthetic_corpus(config, corpus_root)

    model = build_baseline("unet", input_size=256, seed=0)
    train_cfg = TrainConfig(epochs=50)  # stock lr 1e-3 / batch 6 / adam defaults
    best, _ = train_baseline(model, manifest, train_cfg, data_root=corpus_root,
                             out_dir=tmp_path / "run")
    trained = load_checkpoint_into(build_baseline("unet", input_size=256, seed=0), best)
    pair = evaluate_once(trained, manifest.for_split("test"), None, 0, 0,
                         data_root=corpus_root, input_size=256)
    dice_ok = pair.dice >= 0.6

    torch.manual_seed(0)
    overfit = build_baseline("unet", input_size=64, seed=0)
    from glyphseg.corpus import load_corpus_items

    item = load_corpus_items(manifest.for_split("train")[:1], corpus_root, 64)[0]
    image = torch.from_numpy(item.image.astype(np.float32)).permute(2, 0, 1)[None]
    target = torch.from_numpy(item.mask.bits.astype(np.float32))[None, None]
    opt = torch.optim.Adam(overfit.parameters(), lr=1e-3)
    overfit.train()
    for _ in range(50):
        opt.zero_grad()
        loss = combined_loss(overfit(image), target, LossWeights())
        loss.backward()
        opt.step()
    overfit_ok = loss.item() < 0.3

    ok = dice_ok and overfit_ok
    _report(9, "baseline sanity", ok,
            f"unet test dice {pair.dice:.3f} (>= 0.6), overfit loss {loss.item():.3f} (< 0.3)")
    assert ok


# -- criterion 10: table fidelity ------------------------------------------------------

IMAGE_LEVEL_ROWS = [
    ("SAM", "1 random point"),
    ("SAM", "2 random point"),
    ("SAM", "0.5 Bbox"),
    ("SAM", "0.75 Bbox"),
    ("Finetuned-SAM", "1 random point"),
    ("Finetuned-SAM", "2 random point"),
    ("Finetuned-SAM", "0.5 Bbox"),
    ("Finetuned-SAM", "0.75 Bbox"),
]

PER_BLOCK_ROWS = [
    ("SAM", "1 random point/block"),
    ("SAM", "2 random points/block"),
    ("SAM", "3 random points/block"),
    ("Finetuned-SAM", "1 random point/block"),
    ("Finetuned-SAM", "2 random points/block"),
    ("Finetuned-SAM", "3 random points/block"),
]


def test_criterion_10_table_fidelity(determinism_runs, tmp_path):
    from glyphseg.cli import main

    (corpus, run, _), _ = determinism_runs
    out = tmp_path / "table"
    strategies = (
        "eval.strategies=["
        "{kind: points, k: 1}, {kind: points, k: 2},"
        "{kind: box, scale: 0.5}, {kind: box, scale: 0.75},"
        "{kind: points, k: 1, scope: per_block}, {kind: points, k: 2, scope: per_block},"
        "{kind: points, k: 3, scope: per_block}]"
    )
    code = main(["eval", "--out", str(out), "--variant", "stub",
                 "--set", f"data.root={corpus}", "--set", "data.input_size=64",
                 "--set", "eval.n_runs=5", "--set", strategies,
                 "--set", f"eval.models=[{{checkpoint: null}}, {{checkpoint: {run / 'best.pt'}}}]"])
    assert code == 0

    rows = list(csv.reader((out / "results.csv").open()))
    body = rows[1:]
    cells: dict[tuple[str, str], list[list[str]]] = {}
    for row in body:
        cells.setdefault((row[0], row[1]), []).append(row)

    expected = IMAGE_LEVEL_ROWS + PER_BLOCK_ROWS
    coverage_ok = sorted(cells.keys()) == sorted(expected)
    shape_ok = len(body) == 7 * len(expected)

    runs_ok = True
    mean_err = 0.0
    for key in expected:
        block = cells.get(key, [])
        runs_ok = runs_ok and [r[4] for r in block] == ["0", "1", "2", "3", "4", "mean", "std"]
        if len(block) == 7:
            for col in (5, 6):
                per_run = [float(r[col]) for r in block[:5]]
                mean_err = max(mean_err, abs(np.mean(per_run) - float(block[5][col])))
    runs_ok = runs_ok and mean_err <= 1e-9

    ok = coverage_ok and shape_ok and runs_ok
    _report(10, "table fidelity", ok,
            f"all 14 rows covered={coverage_ok}, 5 runs + mean/std={runs_ok}, "
            f"mean recompute err {mean_err:.1e}")
    assert ok
