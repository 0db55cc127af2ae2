"""Shared fixtures: small deterministic synthetic corpora and stub models."""

import pytest

from glyphseg.corpus import DatasetManifest
from glyphseg.modelzoo import load_pretrained_promptable
from glyphseg.synthcorpus import SynthConfig, generate_synthetic_corpus

FIXED_CREATED_AT = "2026-01-01T00:00:00Z"


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory) -> tuple[str, DatasetManifest]:
    """10 images, 64 px, multi-block; shared read-only across the suite."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    config = SynthConfig(
        n_images=10, image_size=64, blocks_per_image=(2, 4), clutter_shapes=3, seed=5
    )
    manifest = generate_synthetic_corpus(config, root, created_at=FIXED_CREATED_AT)
    return str(root), manifest


@pytest.fixture(scope="session")
def single_block_corpus(tmp_path_factory) -> tuple[str, DatasetManifest]:
    """Every image holds exactly one block, so per-block == image-level prompting."""
    root = tmp_path_factory.mktemp("single_block_corpus")
    config = SynthConfig(
        n_images=6, image_size=64, blocks_per_image=(1, 1), clutter_shapes=2, seed=6
    )
    manifest = generate_synthetic_corpus(config, root, created_at=FIXED_CREATED_AT)
    return str(root), manifest


@pytest.fixture()
def stub_model():
    return load_pretrained_promptable(variant="stub", seed=0)
