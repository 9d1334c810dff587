"""
Patch encoders: a frozen toy backbone (random projection or loaded features)
followed by the aligner head (channel LayerNorm + per-patch D→C projection)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from utils.errors import ValidationError
from utils.file_handlers import read_netpbm, read_vtft, write_netpbm, write_vtft
from utils.numeric_core import ParamSet, Tensor, channel_layernorm, einsum, reshape

BACKBONE_KINDS = ("random-projection", "feature-file")
ENCODER_PREFIXES = ("visual", "tactile")


@dataclass(frozen=True)
class Raster:
    """8-bit image, H×W×channels, channels 1 (gray) or 3 (RGB)."""

    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.uint8)
        if samples.ndim == 2:
            samples = samples[:, :, None]
        if samples.ndim != 3 or samples.shape[2] not in (1, 3):
            raise ValidationError(f"raster must be H×W×1 or H×W×3, got {samples.shape}")
        if samples.shape[0] == 0 or samples.shape[1] == 0:
            raise ValidationError("raster must have positive width and height")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]

    def rgb(self) -> np.ndarray:
        return np.repeat(self.samples, 3, axis=2) if self.channels == 1 else self.samples

    @classmethod
    def load(cls, path) -> "Raster":
        return cls(read_netpbm(path))

    def save(self, path):
        write_netpbm(self.samples, path)


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 224
    patch_size: int = 16
    backbone_dim: int = 32
    shared_dim: int = 16
    backbone_kind: str = "random-projection"
    channels: int = 3
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_side <= 0 or self.image_side % self.patch_size:
            raise ValidationError(
                f"image side {self.image_side} is not divisible by patch size {self.patch_size}"
            )
        if self.backbone_dim <= 0 or self.shared_dim <= 0:
            raise ValidationError("backbone and shared dimensions must be positive")
        if self.backbone_kind not in BACKBONE_KINDS:
            raise ValidationError(f"unknown backbone kind {self.backbone_kind!r}")
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")
        if self.ln_eps <= 0:
            raise ValidationError("layernorm eps must be positive")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def input_dim(self) -> int:
        if self.backbone_kind == "feature-file":
            return self.backbone_dim
        return self.patch_size * self.patch_size * self.channels


# ── Patches ────────────────────────────────────────────────────────────────────

def patchify(image: Raster, config: EncoderConfig) -> np.ndarray:
    """Split into P×P patches scaled to [0, 1]; each flattened in (row, col, channel) order."""
    size = config.patch_size
    if image.height % size or image.width % size:
        raise ValidationError(f"image {image.width}×{image.height} is not divisible by patch size {size}")
    rows, cols = image.height // size, image.width // size
    grid = image.samples.reshape(rows, size, cols, size, image.channels).transpose(0, 2, 1, 3, 4)
    return grid.reshape(rows, cols, size * size * image.channels).astype(np.float64) / 255.0


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> Raster:
    rows, cols, _ = patches.shape
    grid = np.rint(patches * 255.0).astype(np.uint8).reshape(rows, cols, patch_size, patch_size, channels)
    return Raster(grid.transpose(0, 2, 1, 3, 4).reshape(rows * patch_size, cols * patch_size, channels))


# ── Parameters ─────────────────────────────────────────────────────────────────

def backbone_names(prefix: str) -> tuple:
    return (f"{prefix}.backbone.weight", f"{prefix}.backbone.bias")


def aligner_names(prefix: str) -> tuple:
    return (f"{prefix}.aligner.gamma", f"{prefix}.aligner.beta",
            f"{prefix}.aligner.weight", f"{prefix}.aligner.bias")


def init_encoder_params(config: EncoderConfig, seed, prefix: str) -> dict:
    """Seeded parameters for one encoder, keyed ``<prefix>.<block>.<tensor>``."""
    rng = np.random.default_rng(seed)
    dim, shared = config.backbone_dim, config.shared_dim
    if config.backbone_kind == "feature-file":
        weight = np.eye(dim)
    else:
        weight = rng.standard_normal((config.input_dim, dim))
        weight /= np.linalg.norm(weight, axis=0, keepdims=True)
    weight_name, bias_name = backbone_names(prefix)
    gamma, beta, projection, projection_bias = aligner_names(prefix)
    return {
        weight_name: weight,
        bias_name: np.zeros(dim),
        gamma: np.ones(dim),
        beta: np.zeros(dim),
        projection: rng.standard_normal((dim, shared)) / np.sqrt(dim),
        projection_bias: np.zeros(shared),
    }


def init_dual_encoder(config: EncoderConfig, seed: int) -> ParamSet:
    """Visual and tactile encoders in one ParamSet; backbones start frozen."""
    values = {}
    for index, prefix in enumerate(ENCODER_PREFIXES):
        values.update(init_encoder_params(config, [seed, index], prefix))
    trainable = {name: ".aligner." in name for name in values}
    return ParamSet(values, trainable)


# ── Encoding ───────────────────────────────────────────────────────────────────

def prepare_input(item, config: EncoderConfig) -> np.ndarray:
    """Turn a Raster or a D×G×G feature map into one backbone input."""
    if config.backbone_kind == "random-projection":
        if not isinstance(item, Raster):
            raise ValidationError("random-projection backbone expects a Raster input")
        if item.channels != config.channels:
            raise ValidationError(f"raster has {item.channels} channels, encoder expects {config.channels}")
        if item.height != config.image_side or item.width != config.image_side:
            raise ValidationError(f"raster is {item.width}×{item.height}, encoder expects side {config.image_side}")
        return patchify(item, config)
    if isinstance(item, Raster):
        raise ValidationError("feature-file backbone expects a feature map input")
    features = np.asarray(item, dtype=np.float64)
    expected = (config.backbone_dim, config.grid, config.grid)
    if features.shape != expected:
        raise ValidationError(f"feature map shape {features.shape} does not match {expected}")
    return features


def encode_batch(inputs: np.ndarray, params: ParamSet, config: EncoderConfig, prefix: str) -> Tensor:
    """Encode a stacked batch of prepared inputs into an N×C×G×G tensor."""
    inputs = np.asarray(inputs, dtype=np.float64)
    weight_name, bias_name = backbone_names(prefix)
    gamma, beta, projection, projection_bias = aligner_names(prefix)
    if params[weight_name].shape[0] != config.input_dim or params[projection].shape[1] != config.shared_dim:
        raise ValidationError(f"{prefix} parameters do not match the encoder config")
    dim = config.backbone_dim
    if config.backbone_kind == "feature-file":
        if inputs.ndim != 4 or inputs.shape[1] != dim:
            raise ValidationError(f"feature batch shape {inputs.shape} does not match backbone dim {dim}")
        features = einsum("ndhw,de->nehw", inputs, params.leaf(weight_name))
    else:
        if inputs.ndim != 4 or inputs.shape[3] != config.input_dim:
            raise ValidationError(f"patch batch shape {inputs.shape} does not match patch dim {config.input_dim}")
        features = einsum("nhwk,kd->ndhw", inputs, params.leaf(weight_name))
    features = features + reshape(params.leaf(bias_name), (dim, 1, 1))
    normed = channel_layernorm(features, params.leaf(gamma), params.leaf(beta), config.ln_eps)
    shared = einsum("ndhw,dc->nchw", normed, params.leaf(projection))
    return shared + reshape(params.leaf(projection_bias), (config.shared_dim, 1, 1))


def encode(item, params: ParamSet, config: EncoderConfig, prefix: str) -> Tensor:
    """Encode one Raster or feature map into a C×G×G tensor."""
    batch = prepare_input(item, config)[None]
    shared = encode_batch(batch, params, config, prefix)
    return reshape(shared, shared.shape[1:])


# ── Feature files ──────────────────────────────────────────────────────────────

def load_feature_map(path) -> np.ndarray:
    return read_vtft(path)


def save_feature_map(feature_map, path):
    if isinstance(feature_map, Tensor):
        feature_map = feature_map.data
    write_vtft(feature_map, path)
