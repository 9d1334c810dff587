"""
Saliency maps and the localization metric stack: pixel AP / mAP, IoU / mIoU,
interactive IIoU, Start/Middle/End robustness, fixed-shape baselines and
heatmap export
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from utils.alignment import LossConfig, TactileDescriptor, similarity_map
from utils.corpus import MaskImage, format_record_line
from utils.encoders import EncoderConfig, encode
from utils.errors import ValidationError
from utils.file_handlers import write_netpbm
from utils.pairing import FramePosition, interior_members, select_frame

logger = logging.getLogger(__name__)

AP_FLAVORS = ("pixel-ranking",)
DESCRIPTOR_SOURCES = ("prototype", "frame")
PROTOTYPE_POSITIONS = ("start", "middle", "end", "all")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    ap_flavor: str = "pixel-ranking"
    descriptor: str = "prototype"
    frame_position: str = "all"
    upsampling: str = "bilinear-align-corners"

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValidationError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.ap_flavor not in AP_FLAVORS:
            raise ValidationError(f"unknown AP flavor {self.ap_flavor!r}")
        if self.descriptor not in DESCRIPTOR_SOURCES:
            raise ValidationError(f"descriptor must be one of {DESCRIPTOR_SOURCES}")
        if self.frame_position not in PROTOTYPE_POSITIONS:
            raise ValidationError(f"frame_position must be one of {PROTOTYPE_POSITIONS}")

    def echo(self) -> dict:
        return {
            "threshold": self.threshold,
            "ap_flavor": self.ap_flavor,
            "upsampling": self.upsampling,
            "descriptor": self.descriptor,
            "frame_position": self.frame_position,
        }


@dataclass(frozen=True)
class SaliencyMap:
    scores: np.ndarray
    sample_id: str = ""
    provenance: str = ""

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or 0 in scores.shape:
            raise ValidationError(f"saliency must be a non-empty H×W array, got {scores.shape}")
        if not np.all(np.isfinite(scores)) or scores.min() < 0 or scores.max() > 1:
            raise ValidationError("saliency scores must be finite and lie in [0, 1]")
        object.__setattr__(self, "scores", scores)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


# ── Saliency ───────────────────────────────────────────────────────────────────

def _corner_coordinates(source: int, target: int):
    if target == 1 or source == 1:
        positions = np.zeros(target)
    else:
        positions = np.arange(target) * ((source - 1) / (target - 1))
    lower = np.minimum(np.floor(positions).astype(int), source - 1)
    upper = np.minimum(lower + 1, source - 1)
    return lower, upper, positions - lower


def upsample_bilinear(grid, height: int, width: int) -> np.ndarray:
    """Align-corners bilinear resize: grid corners land on image corners."""
    grid = np.asarray(grid, dtype=np.float64)
    y0, y1, wy = _corner_coordinates(grid.shape[0], height)
    x0, x1, wx = _corner_coordinates(grid.shape[1], width)
    top = grid[y0][:, x0] * (1 - wx) + grid[y0][:, x1] * wx
    bottom = grid[y1][:, x0] * (1 - wx) + grid[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def normalize_min_max(values) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if not high > low:
        return np.zeros(values.shape)
    return np.clip((values - low) / (high - low), 0.0, 1.0)


def compute_saliency(f_v, descriptor, cfg: LossConfig, width: int, height: int,
                     sample_id="", provenance="") -> SaliencyMap:
    """Similarity map upsampled to image resolution and min-max normalised."""
    if width <= 0 or height <= 0:
        raise ValidationError(f"invalid saliency size {width}×{height}")
    grid = similarity_map(descriptor, f_v, cfg).values
    if isinstance(descriptor, TactileDescriptor) and not provenance:
        provenance = descriptor.provenance
    return SaliencyMap(normalize_min_max(upsample_bilinear(grid, height, width)), sample_id, provenance)


def binarize(saliency: SaliencyMap, threshold: float) -> MaskImage:
    return MaskImage(saliency.scores >= threshold)


# ── Metrics ────────────────────────────────────────────────────────────────────

def _same_size(a, b):
    if (a.height, a.width) != (b.height, b.width):
        raise ValidationError(f"size mismatch: {a.width}×{a.height} vs {b.width}×{b.height}")


def region_iou(pred: MaskImage, gt: MaskImage) -> float:
    """|pred ∩ gt| / |pred ∪ gt|; 1.0 when both are empty."""
    _same_size(pred, gt)
    union = np.logical_or(pred.pixels, gt.pixels).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred.pixels, gt.pixels).sum() / union)


def pixel_average_precision(saliency: SaliencyMap, gt: MaskImage) -> float:
    """Mean precision at the rank of every positive pixel; ties ranked in row-major order."""
    _same_size(saliency, gt)
    labels = gt.pixels.ravel()
    positives = int(labels.sum())
    if positives == 0:
        raise ValidationError(f"ground truth for {saliency.sample_id or 'sample'} is empty")
    order = np.argsort(-saliency.scores.ravel(), kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / positives)


# ── Models ─────────────────────────────────────────────────────────────────────

def baseline_mask(kind: str, width: int, height: int) -> MaskImage:
    """Full-square or inscribed-circle mask (pixel-centre inclusion, radius min(w, h)/2)."""
    if width <= 0 or height <= 0:
        raise ValidationError(f"invalid baseline size {width}×{height}")
    if kind == "square":
        return MaskImage(np.ones((height, width), dtype=bool))
    if kind == "circle":
        ys, xs = np.mgrid[0:height, 0:width]
        cy, cx = (height - 1) / 2, (width - 1) / 2
        radius = min(width, height) / 2
        return MaskImage((ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2)
    raise ValidationError(f"unknown baseline kind {kind!r}")


class BaselineModel:
    """Ignores its inputs and predicts a fixed square or circle."""

    def __init__(self, kind: str):
        self.kind = kind

    def __call__(self, visual, descriptor, width, height):
        return baseline_mask(self.kind, width, height).pixels.astype(np.float64)


class EncoderModel:
    """Saliency from the trained visual encoder."""

    def __init__(self, params, encoder: EncoderConfig, loss: LossConfig):
        self.params = params
        self.encoder = encoder
        self.loss = loss
        self._cache = {}

    def visual_features(self, visual) -> np.ndarray:
        key = id(visual)
        if key not in self._cache:
            self._cache[key] = (visual, encode(visual, self.params, self.encoder, "visual").data)
        return self._cache[key][1]

    def __call__(self, visual, descriptor, width, height):
        return compute_saliency(self.visual_features(visual), descriptor, self.loss, width, height)


def _run_model(model, visual, descriptor, mask: MaskImage, sample_id) -> SaliencyMap:
    result = model(visual, descriptor, mask.width, mask.height)
    saliency = result if isinstance(result, SaliencyMap) else SaliencyMap(result, sample_id)
    _same_size(saliency, mask)
    return saliency


# ── Reports ────────────────────────────────────────────────────────────────────

@dataclass
class LocalizationSample:
    sample_id: str
    category: str
    visual: object
    descriptor: object
    mask: MaskImage
    instance_id: str | None = None


@dataclass
class InteractiveSample:
    sample_id: str
    visual: object
    descriptors: tuple
    masks: tuple
    categories: tuple

    def __post_init__(self):
        if len(self.descriptors) != 2 or len(self.masks) != 2 or len(self.categories) != 2:
            raise ValidationError(f"interactive sample {self.sample_id!r} needs exactly two queries")
        _same_size(self.masks[0], self.masks[1])
        if self.categories[0] == self.categories[1]:
            raise ValidationError(f"interactive sample {self.sample_id!r} repeats category {self.categories[0]!r}")


@dataclass
class CategoryMetrics:
    mean_ap: float
    mean_iou: float
    samples: int


@dataclass
class EvalReport:
    mean_ap: float
    mean_iou: float
    samples: int
    per_category: dict = field(default_factory=dict)
    iiou: float | None = None
    config: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"category": name, "mAP": m.mean_ap, "mIoU": m.mean_iou, "samples": m.samples}
                for name, m in self.per_category.items()]
        rows.append({"category": "overall", "mAP": self.mean_ap, "mIoU": self.mean_iou, "samples": self.samples})
        return pd.DataFrame(rows, columns=["category", "mAP", "mIoU", "samples"])

    def to_records(self) -> list:
        lines = [format_record_line({key: value for key, value in self.config.items()})]
        overall = {"scope": "overall", "mAP": f"{self.mean_ap:.6f}", "mIoU": f"{self.mean_iou:.6f}",
                   "samples": self.samples}
        if self.iiou is not None:
            overall["IIoU"] = f"{self.iiou:.6f}"
        lines.append(format_record_line(overall))
        for name, metrics in self.per_category.items():
            lines.append(format_record_line({
                "scope": "category", "category": name, "mAP": f"{metrics.mean_ap:.6f}",
                "mIoU": f"{metrics.mean_iou:.6f}", "samples": metrics.samples,
            }))
        return lines

    def to_table(self) -> str:
        table = self.to_frame().to_string(index=False, float_format=lambda v: f"{v:.2f}")
        if self.iiou is not None:
            table += f"\nIIoU: {self.iiou:.2f}"
        return table

    def write(self, path):
        Path(path).write_text("".join(line + "\n" for line in self.to_records()), encoding="utf-8")


def _percent_mean(values) -> float:
    return 100.0 * float(np.mean(np.asarray(values, dtype=np.float64))) if values else 0.0


def evaluate_localization(samples, model, cfg: EvalConfig, extra_config=None) -> EvalReport:
    """mAP and mIoU (percent) over samples, with a per-category breakdown."""
    samples = list(samples)
    if not samples:
        raise ValidationError("evaluation dataset is empty")
    aps, ious = [], []
    by_category = {}
    for sample in samples:
        if sample.mask.area == 0:
            raise ValidationError(f"sample {sample.sample_id!r} has an empty ground-truth mask")
        saliency = _run_model(model, sample.visual, sample.descriptor, sample.mask, sample.sample_id)
        ap = pixel_average_precision(saliency, sample.mask)
        iou = region_iou(binarize(saliency, cfg.threshold), sample.mask)
        aps.append(ap)
        ious.append(iou)
        by_category.setdefault(sample.category, ([], []))
        by_category[sample.category][0].append(ap)
        by_category[sample.category][1].append(iou)
    per_category = {
        name: CategoryMetrics(_percent_mean(cat_aps), _percent_mean(cat_ious), len(cat_aps))
        for name, (cat_aps, cat_ious) in sorted(by_category.items())
    }
    config = cfg.echo()
    config.update(extra_config or {})
    report = EvalReport(_percent_mean(aps), _percent_mean(ious), len(samples), per_category, config=config)
    logger.info("evaluated %d samples: mAP %.2f mIoU %.2f", report.samples, report.mean_ap, report.mean_iou)
    return report


def evaluate_interactive(samples, model, cfg: EvalConfig) -> float:
    """Percentage of samples where both queries localize with IoU > 0.5."""
    samples = list(samples)
    if not samples:
        raise ValidationError("interactive dataset is empty")
    successes = 0
    for sample in samples:
        ious = []
        for descriptor, mask in zip(sample.descriptors, sample.masks):
            saliency = _run_model(model, sample.visual, descriptor, mask, sample.sample_id)
            ious.append(region_iou(binarize(saliency, cfg.threshold), mask))
        if all(iou > 0.5 for iou in ious):
            successes += 1
    return 100.0 * successes / len(samples)


def robustness_report(instances, model, dataset, cfg: EvalConfig, describe, extra_config=None) -> dict:
    """Evaluate with Start, Middle and End tactile frames of each sample's touch instance.

    ``instances`` maps instance ids to TouchInstances; ``describe`` maps a
    sample id to its aggregated tactile descriptor vector. Middle averages all
    non-endpoint frames when the instance has more than two.
    """
    if not isinstance(instances, dict):
        instances = {instance.instance_id: instance for instance in instances}
    dataset = list(dataset)
    cache = {}

    def descriptor_for(sample_id):
        if sample_id not in cache:
            result = describe(sample_id)
            cache[sample_id] = np.asarray(getattr(result, "values", result))
        return cache[sample_id]

    reports = {}
    for position in FramePosition:
        samples = []
        for sample in dataset:
            instance = instances.get(sample.instance_id)
            if instance is None:
                raise ValidationError(f"sample {sample.sample_id!r} is not linked to a touch instance")
            if position is FramePosition.MIDDLE:
                vectors = [descriptor_for(member) for member in interior_members(instance)]
                values = np.mean(vectors, axis=0) if len(vectors) > 1 else vectors[0]
            else:
                values = descriptor_for(select_frame(instance, position))
            samples.append(LocalizationSample(sample.sample_id, sample.category, sample.visual,
                                              TactileDescriptor(values), sample.mask, sample.instance_id))
        extra = dict(extra_config or {})
        extra["frame"] = position.value
        reports[position.value] = evaluate_localization(samples, model, cfg, extra)
    return reports


def robustness_frame(reports: dict) -> pd.DataFrame:
    return pd.DataFrame(
        [{"frame": key, "mAP": report.mean_ap, "mIoU": report.mean_iou, "samples": report.samples}
         for key, report in reports.items()],
        columns=["frame", "mAP", "mIoU", "samples"],
    )


# ── Heatmaps ───────────────────────────────────────────────────────────────────

def _round_half_up(values) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def export_heatmap(saliency: SaliencyMap, base, path) -> tuple:
    """Write ``<path>.pgm`` (255·score) and ``<path>-overlay.ppm`` (half image + half red score)."""
    if (base.height, base.width) != (saliency.height, saliency.width):
        raise ValidationError(
            f"base image {base.width}×{base.height} does not match saliency {saliency.width}×{saliency.height}"
        )
    path = Path(path)
    gray_path = path.with_name(path.name + ".pgm")
    overlay_path = path.with_name(path.name + "-overlay.ppm")
    gray = _round_half_up(255.0 * saliency.scores).astype(np.uint8)
    red = np.zeros(saliency.scores.shape + (3,))
    red[:, :, 0] = 255.0 * saliency.scores
    overlay = _round_half_up(0.5 * base.rgb().astype(np.float64) + 0.5 * red).astype(np.uint8)
    write_netpbm(gray, gray_path)
    write_netpbm(overlay, overlay_path)
    return gray_path, overlay_path
