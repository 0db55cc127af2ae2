"""Segmenter zoo: promptable encoder/decoder models and prompt-free baselines.

A promptable segmenter decomposes into an image encoder, a prompt encoder,
and a mask decoder; the encoders are pretrained, opaque, and freezable, only
the decoder is meant to train. The `vit_base` variant wraps the published
ViT-B components through the optional `segment-anything` dependency; the
`stub` variant is a small randomly initialized model with the same component
interface and a 64-px input, for weight-free tests of the full pipeline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    ChecksumMismatch,
    EmptyPromptSet,
    UnsupportedKind,
    UnsupportedVariant,
    WeightsNotFound,
)
from .prompts import PromptSet

log = logging.getLogger(__name__)

STUB_EMBED_DIM = 32
STUB_INPUT_SIZE = 64
STUB_GRID_SIZE = 8

WEIGHT_CACHE_ENV = "GLYPHSEG_CACHE"


# -- stub components -----------------------------------------------------------
#
# The three stubs implement the same call signatures as the published SAM
# components, so the wrapper below runs either variant unchanged:
#   image_encoder(x)                            -> (B, C, G, G)
#   prompt_encoder(points=, boxes=, masks=)     -> sparse (B, T, C), dense (B, C, G, G)
#   prompt_encoder.get_dense_pe()               -> (1, C, G, G)
#   mask_decoder(image_embeddings=, image_pe=, sparse_prompt_embeddings=,
#                dense_prompt_embeddings=, multimask_output=) -> (low_res, iou_pred)


class StubImageEncoder(nn.Module):
    def __init__(self, embed_dim: int = STUB_EMBED_DIM) -> None:
        super().__init__()
        self.patch = nn.Conv2d(3, embed_dim, kernel_size=8, stride=8)
        self.mix = nn.Conv2d(embed_dim, embed_dim, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mix(F.relu(self.patch(x)))


class StubPromptEncoder(nn.Module):
    def __init__(self, embed_dim: int = STUB_EMBED_DIM, input_size: int = STUB_INPUT_SIZE,
                 grid_size: int = STUB_GRID_SIZE) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.input_size = input_size
        self.grid_size = grid_size
        # frozen random Fourier features for positional encoding
        self.register_buffer("fourier", torch.randn(2, embed_dim // 2))
        # 0: positive point, 1: negative point, 2/3: box corners
        self.kind_embed = nn.Embedding(4, embed_dim)
        self.no_mask_embed = nn.Embedding(1, embed_dim)

    def _pe(self, coords01: torch.Tensor) -> torch.Tensor:
        proj = (2.0 * coords01 - 1.0) @ self.fourier * (2.0 * torch.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def forward(self, points=None, boxes=None, masks=None):
        tokens = []
        if points is not None:
            coords, labels = points
            pe = self._pe(coords / self.input_size)
            kind = torch.where(labels > 0, 0, 1)
            tokens.append(pe + self.kind_embed(kind))
        if boxes is not None:
            corners = boxes.reshape(-1, 2, 2)
            pe = self._pe(corners / self.input_size)
            kind = torch.tensor([2, 3], device=boxes.device).expand(corners.shape[0], 2)
            tokens.append(pe + self.kind_embed(kind))
        if tokens:
            batch = tokens[0].shape[0]
            sparse = torch.cat(tokens, dim=1)
        else:
            batch = 1
            weight = self.no_mask_embed.weight
            sparse = torch.zeros(1, 0, self.embed_dim, device=weight.device, dtype=weight.dtype)
        dense = self.no_mask_embed.weight.reshape(1, -1, 1, 1).expand(
            batch, self.embed_dim, self.grid_size, self.grid_size
        )
        return sparse, dense

    def get_dense_pe(self) -> torch.Tensor:
        g = self.grid_size
        centers = (torch.arange(g, dtype=self.fourier.dtype, device=self.fourier.device) + 0.5) / g
        yy, xx = torch.meshgrid(centers, centers, indexing="ij")
        pe = self._pe(torch.stack([xx, yy], dim=-1))
        return pe.permute(2, 0, 1)[None]


class StubMaskDecoder(nn.Module):
    """Prompt tokens attend over the image grid; a tiny hypernetwork emits per-pixel weights."""

    def __init__(self, embed_dim: int = STUB_EMBED_DIM) -> None:
        super().__init__()
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_mlp = nn.Sequential(
            nn.Linear(embed_dim, embed_dim), nn.ReLU(), nn.Linear(embed_dim, embed_dim // 4)
        )
        self.up1 = nn.ConvTranspose2d(embed_dim, embed_dim // 2, kernel_size=2, stride=2)
        self.up2 = nn.ConvTranspose2d(embed_dim // 2, embed_dim // 4, kernel_size=2, stride=2)
        self.iou_head = nn.Linear(embed_dim, 1)

    def forward(self, image_embeddings, image_pe, sparse_prompt_embeddings,
                dense_prompt_embeddings, multimask_output: bool = False):
        src = image_embeddings + dense_prompt_embeddings
        keys = (src + image_pe).flatten(2).transpose(1, 2)
        att = torch.softmax(
            sparse_prompt_embeddings @ keys.transpose(1, 2) / keys.shape[-1] ** 0.5, dim=-1
        )
        read = att @ self.v_proj(keys)
        summary = read.mean(dim=1)
        weights = self.out_mlp(summary)
        up = self.up2(F.relu(self.up1(src)))
        low_res = torch.einsum("bchw,bc->bhw", up, weights).unsqueeze(1)
        iou_pred = torch.sigmoid(self.iou_head(summary))
        return low_res, iou_pred


# -- promptable wrapper ----------------------------------------------------------


class PromptableSegmenter(nn.Module):
    """Uniform forward over (image encoder, prompt encoder, mask decoder).

    Input images are (B, 3, S, S) float tensors on the raw 0..255 scale with
    S = `input_size`; prompt coordinates are in the same S-pixel space. The
    forward pass resizes to the backbone's native resolution, normalizes,
    runs the three components in single-mask mode, upsamples the decoder's
    low-resolution logits back to S, and returns sigmoid probabilities.
    """

    prompt_free = False

    def __init__(self, image_encoder, prompt_encoder, mask_decoder, *,
                 input_size: int, native_size: int, pixel_mean, pixel_std,
                 variant: str) -> None:
        super().__init__()
        self.image_encoder = image_encoder
        self.prompt_encoder = prompt_encoder
        self.mask_decoder = mask_decoder
        self.input_size = input_size
        self.native_size = native_size
        self.variant = variant
        self.encoders_frozen = False
        self.register_buffer("pixel_mean", torch.as_tensor(pixel_mean, dtype=torch.float32).reshape(-1, 1, 1))
        self.register_buffer("pixel_std", torch.as_tensor(pixel_std, dtype=torch.float32).reshape(-1, 1, 1))

    def forward(self, images: torch.Tensor, point_coords: torch.Tensor | None = None,
                point_labels: torch.Tensor | None = None,
                boxes: torch.Tensor | None = None) -> torch.Tensor:
        if point_coords is None and boxes is None:
            raise EmptyPromptSet("promptable segmenter needs at least one point or box prompt")
        x = images
        if self.native_size != self.input_size:
            x = F.interpolate(x, size=(self.native_size, self.native_size),
                              mode="bilinear", align_corners=False)
        x = (x - self.pixel_mean) / self.pixel_std
        embeddings = self.image_encoder(x)

        scale = self.native_size / self.input_size
        points = None
        if point_coords is not None:
            points = (point_coords.to(x.dtype) * scale, point_labels)
        scaled_boxes = boxes.to(x.dtype) * scale if boxes is not None else None
        sparse, dense = self.prompt_encoder(points=points, boxes=scaled_boxes, masks=None)
        low_res, _ = self.mask_decoder(
            image_embeddings=embeddings,
            image_pe=self.prompt_encoder.get_dense_pe(),
            sparse_prompt_embeddings=sparse,
            dense_prompt_embeddings=dense,
            multimask_output=False,
        )
        if low_res.shape[-1] != self.input_size:
            low_res = F.interpolate(low_res, size=(self.input_size, self.input_size),
                                    mode="bilinear", align_corners=False)
        return torch.sigmoid(low_res)


def freeze_encoders(model: PromptableSegmenter) -> PromptableSegmenter:
    """Exclude image and prompt encoder parameters from gradients. Idempotent."""
    for param in model.image_encoder.parameters():
        param.requires_grad_(False)
    for param in model.prompt_encoder.parameters():
        param.requires_grad_(False)
    model.encoders_frozen = True
    return model


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over named parameters in name order; bit-exact change detector."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def encoder_checksums(model: PromptableSegmenter) -> dict[str, str]:
    return {
        "image_encoder": parameter_checksum(model.image_encoder),
        "prompt_encoder": parameter_checksum(model.prompt_encoder),
        "mask_decoder": parameter_checksum(model.mask_decoder),
    }


# -- loading ---------------------------------------------------------------------


def resolve_weights_path(explicit: str | Path | None) -> Path | None:
    """Explicit path if given, else first sam_vit_b*.pth under $GLYPHSEG_CACHE."""
    if explicit:
        return Path(explicit)
    cache = os.environ.get(WEIGHT_CACHE_ENV)
    if cache:
        hits = sorted(Path(cache).glob("sam_vit_b*.pth"))
        if hits:
            return hits[0]
    return None


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_pretrained_promptable(
    weights_path: str | Path | None = None,
    variant: str = "vit_base",
    *,
    seed: int = 0,
    expected_sha256: str | None = None,
) -> PromptableSegmenter:
    """Build a promptable segmenter in inference mode.

    `vit_base` consumes the published ViT-B weight file (path argument or
    $GLYPHSEG_CACHE) through the `segment-anything` package; `stub` needs no
    weights and is seeded for reproducible random initialization.
    """
    if variant == "stub":
        gen_state = torch.get_rng_state()
        try:
            torch.manual_seed(seed)
            model = PromptableSegmenter(
                StubImageEncoder(),
                StubPromptEncoder(),
                StubMaskDecoder(),
                input_size=STUB_INPUT_SIZE,
                native_size=STUB_INPUT_SIZE,
                pixel_mean=[127.5, 127.5, 127.5],
                pixel_std=[127.5, 127.5, 127.5],
                variant="stub",
            )
        finally:
            torch.set_rng_state(gen_state)
        model.eval()
        return model

    if variant != "vit_base":
        raise UnsupportedVariant(f"unknown variant {variant!r}; expected vit_base or stub")

    path = resolve_weights_path(weights_path)
    if path is None or not path.is_file():
        raise WeightsNotFound(
            f"ViT-B weight file not found (path={path}); pass --weights or set ${WEIGHT_CACHE_ENV}"
        )
    checksum = file_sha256(path)
    log.info("loaded weights %s sha256=%s", path, checksum)
    if expected_sha256 and checksum != expected_sha256.lower():
        raise ChecksumMismatch(f"{path}: sha256 {checksum} != expected {expected_sha256}")

    try:
        from segment_anything import sam_model_registry
    except ImportError as exc:
        raise UnsupportedVariant(
            "variant vit_base needs the optional 'segment-anything' package "
            "(pip install glyphseg[sam])"
        ) from exc
    sam = sam_model_registry["vit_b"](checkpoint=str(path))
    model = PromptableSegmenter(
        sam.image_encoder,
        sam.prompt_encoder,
        sam.mask_decoder,
        input_size=256,
        native_size=sam.image_encoder.img_size,
        pixel_mean=sam.pixel_mean.flatten(),
        pixel_std=sam.pixel_std.flatten(),
        variant="vit_base",
    )
    model.eval()
    return model


# -- baselines ---------------------------------------------------------------------


class _ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class BaselineSegmenter(nn.Module):
    """Prompt-free UNet/autoencoder: 256x256x3 image -> 256x256 probability map.

    Four encoder stages (16, 32, 64, 128 channels) around a 256-channel
    bottleneck with a symmetric decoder; `unet` concatenates skip
    connections, `autoencoder` is identical without them.
    """

    prompt_free = True
    CHANNELS = (16, 32, 64, 128)
    BOTTLENECK = 256

    def __init__(self, kind: str, input_size: int = 256) -> None:
        super().__init__()
        if kind not in ("unet", "autoencoder"):
            raise UnsupportedKind(f"unknown baseline kind {kind!r}")
        self.kind = kind
        self.input_size = input_size
        self.skip_connections = kind == "unet"

        chans = self.CHANNELS
        self.encoder = nn.ModuleList(
            [_ConvBlock(c_in, c_out) for c_in, c_out in zip((3,) + chans[:-1], chans)]
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _ConvBlock(chans[-1], self.BOTTLENECK)
        ups_in = (self.BOTTLENECK,) + chans[:0:-1]
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(c_in, c_out, kernel_size=2, stride=2)
             for c_in, c_out in zip(ups_in, chans[::-1])]
        )
        factor = 2 if self.skip_connections else 1
        self.decoder = nn.ModuleList(
            [_ConvBlock(c * factor, c) for c in chans[::-1]]
        )
        self.head = nn.Conv2d(chans[0], 1, kernel_size=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images / 255.0
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.ups, self.decoder, reversed(skips)):
            x = up(x)
            if self.skip_connections:
                x = torch.cat([x, skip], dim=1)
            x = block(x)
        return torch.sigmoid(self.head(x))


def build_baseline(kind: str, input_size: int = 256, seed: int = 0) -> BaselineSegmenter:
    gen_state = torch.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = BaselineSegmenter(kind, input_size=input_size)
    finally:
        torch.set_rng_state(gen_state)
    model.eval()
    return model


# -- prediction ---------------------------------------------------------------------


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return torch.from_numpy(arr).permute(2, 0, 1)[None]


def prompt_tensors(prompt_set: PromptSet) -> dict[str, torch.Tensor | None]:
    """Batch-of-one prompt tensors for PromptableSegmenter.forward."""
    coords = labels = boxes = None
    if prompt_set.points:
        coords = torch.tensor([[[p.x, p.y] for p in prompt_set.points]], dtype=torch.float32)
        labels = torch.tensor(
            [[1 if p.polarity == "positive" else 0 for p in prompt_set.points]], dtype=torch.int64
        )
    if prompt_set.box is not None:
        b = prompt_set.box
        boxes = torch.tensor([[b.x_min, b.y_min, b.x_max, b.y_max]], dtype=torch.float32)
    return {"point_coords": coords, "point_labels": labels, "boxes": boxes}


def predict_mask(model, image: np.ndarray, prompt_set: PromptSet | None) -> np.ndarray:
    """Probability map in [0, 1] with the image's spatial shape.

    Deterministic in inference mode. Objects exposing `predict_probs(image,
    prompt_set)` are used as-is (testing escape hatch); baselines ignore the
    prompt set; promptable models require a non-empty one.
    """
    if hasattr(model, "predict_probs"):
        return np.asarray(model.predict_probs(image, prompt_set), dtype=np.float32)

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if getattr(model, "prompt_free", False):
                probs = model(_image_tensor(image))
            else:
                if prompt_set is None or prompt_set.is_empty():
                    raise EmptyPromptSet("prediction needs a non-empty prompt set")
                probs = model(_image_tensor(image), **prompt_tensors(prompt_set))
    finally:
        model.train(was_training)
    return probs[0, 0].cpu().numpy()


# -- checkpoints ----------------------------------------------------------------------


@dataclass
class CheckpointMeta:
    model_kind: str
    epoch: int
    val_dice: float
    config_hash: str
    encoder_frozen: bool

    def __post_init__(self) -> None:
        if not (0.0 <= self.val_dice <= 1.0):
            raise ValueError(f"val_dice {self.val_dice} outside [0, 1]")


def save_checkpoint(model: nn.Module, meta: CheckpointMeta, path: str | Path) -> Path:
    """Weight blob plus a CheckpointMeta JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps(asdict(meta), indent=2))
    return path


def load_checkpoint_meta(path: str | Path) -> CheckpointMeta:
    sidecar = Path(path).with_suffix(".json")
    if not sidecar.is_file():
        raise WeightsNotFound(f"checkpoint sidecar not found: {sidecar}")
    return CheckpointMeta(**json.loads(sidecar.read_text()))


def load_checkpoint_into(model: nn.Module, path: str | Path) -> nn.Module:
    path = Path(path)
    if not path.is_file():
        raise WeightsNotFound(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    return model


def copy_checkpoint(src: str | Path, dst: str | Path) -> Path:
    src, dst = Path(src), Path(dst)
    shutil.copy2(src, dst)
    shutil.copy2(src.with_suffix(".json"), dst.with_suffix(".json"))
    return dst
