"""
Dense visuo-tactile alignment: tactile aggregation, similarity maps,
max-pooled pair scores and the symmetric InfoNCE loss
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from utils.errors import ValidationError
from utils.numeric_core import (
    Tensor,
    as_tensor,
    einsum,
    l2_normalize,
    logsumexp,
    max_along,
    mean,
    reshape,
    total,
)

PROVENANCES = ("single-frame", "prototype")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    cosine: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class TactileDescriptor:
    """Spatially averaged tactile feature (length C)."""

    values: np.ndarray
    provenance: str = "single-frame"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValidationError(f"descriptor must be a non-empty vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("descriptor contains NaN or Inf")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown descriptor provenance {self.provenance!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class SimilarityMapGrid:
    values: np.ndarray
    descriptor_id: str = ""
    feature_map_id: str = ""


def _vector(desc):
    if isinstance(desc, TactileDescriptor):
        return as_tensor(desc.values)
    return as_tensor(desc)


def aggregate_tactile(f_t) -> Tensor:
    """Mean over the spatial grid: (..., C, H, W) -> (..., C)."""
    f_t = as_tensor(f_t)
    if f_t.ndim < 3:
        raise ValidationError(f"tactile feature map must be C×H×W, got shape {f_t.shape}")
    if f_t.shape[-1] == 0 or f_t.shape[-2] == 0:
        raise ValidationError("tactile feature map has an empty spatial extent")
    return mean(f_t, axis=(-2, -1))


def describe_tactile(f_t, provenance="single-frame") -> TactileDescriptor:
    return TactileDescriptor(aggregate_tactile(f_t).data, provenance)


def similarity_map_tensor(desc, f_v, cfg: LossConfig) -> Tensor:
    """H×W inner products between a descriptor and every visual patch."""
    desc, f_v = _vector(desc), as_tensor(f_v)
    if desc.ndim != 1 or f_v.ndim != 3 or desc.shape[0] != f_v.shape[0]:
        raise ValidationError(f"descriptor {desc.shape} does not match feature map {f_v.shape}")
    if cfg.cosine:
        desc = l2_normalize(desc, axis=-1)
        f_v = l2_normalize(f_v, axis=0)
    return einsum("c,chw->hw", desc, f_v)


def similarity_map(desc, f_v, cfg: LossConfig, descriptor_id="", feature_map_id="") -> SimilarityMapGrid:
    values = similarity_map_tensor(desc, f_v, cfg).data
    return SimilarityMapGrid(values, descriptor_id, feature_map_id)


def similarity_score(grid) -> tuple:
    """Max-pooled score and its (h, w); ties go to the first entry in row-major order."""
    values = grid.values if isinstance(grid, SimilarityMapGrid) else np.asarray(grid)
    if values.size == 0:
        raise ValidationError("similarity map is empty")
    flat = int(np.argmax(values))
    return float(values.flat[flat]), tuple(int(i) for i in np.unravel_index(flat, values.shape))


def batch_similarity_matrix(tactile, visual, cfg: LossConfig) -> Tensor:
    """S[i][j] = max-pooled similarity of tactile i's descriptor against visual j."""
    tactile = _stack(tactile)
    visual = _stack(visual)
    if tactile.shape[0] == 0:
        raise ValidationError("empty batch")
    if tactile.shape[0] != visual.shape[0]:
        raise ValidationError(f"batch sizes differ: {tactile.shape[0]} tactile, {visual.shape[0]} visual")
    if tactile.shape[1] != visual.shape[1]:
        raise ValidationError(f"channel dims differ: {tactile.shape[1]} vs {visual.shape[1]}")
    desc = aggregate_tactile(tactile)
    if cfg.cosine:
        desc = l2_normalize(desc, axis=-1)
        visual = l2_normalize(visual, axis=1)
    size, _, height, width = visual.shape
    maps = einsum("nc,mchw->nmhw", desc, visual)
    return max_along(reshape(maps, (size, size, height * width)), axis=-1)


def _stack(maps) -> Tensor:
    if isinstance(maps, Tensor):
        stacked = maps
    elif isinstance(maps, np.ndarray):
        stacked = as_tensor(maps)
    else:
        maps = list(maps)
        if not maps:
            raise ValidationError("empty batch")
        if any(isinstance(item, Tensor) for item in maps):
            raise ValidationError("stack tensors with encode_batch before building the similarity matrix")
        stacked = as_tensor(np.stack([np.asarray(item, dtype=np.float64) for item in maps]))
    if stacked.ndim != 4:
        raise ValidationError(f"expected a batch of C×H×W maps, got shape {stacked.shape}")
    return stacked


def symmetric_infonce(similarity, cfg: LossConfig) -> Tensor:
    """Cross-entropy of S/τ against the diagonal, averaged over rows and columns, then halved."""
    similarity = as_tensor(similarity)
    if similarity.ndim != 2 or similarity.shape[0] != similarity.shape[1] or similarity.shape[0] == 0:
        raise ValidationError(f"similarity matrix must be square and non-empty, got {similarity.shape}")
    logits = similarity / cfg.temperature
    diagonal = total(logits * np.eye(similarity.shape[0]), axis=1)
    rows = logsumexp(logits, axis=1) - diagonal
    cols = logsumexp(logits, axis=0) - diagonal
    return 0.5 * (mean(rows) + mean(cols))


def contrastive_loss(tactile, visual, cfg: LossConfig) -> Tensor:
    return symmetric_infonce(batch_similarity_matrix(tactile, visual, cfg), cfg)
