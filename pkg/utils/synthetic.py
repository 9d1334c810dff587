"""
Deterministic synthetic visuo-tactile corpus: touch instances whose tactile
features carry a category signature, single-material close-ups, multi-material
web images and scenes with ground-truth masks
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from utils.corpus import MaskImage, SampleRecord, format_record_line, save_mask, write_manifest
from utils.encoders import Raster
from utils.errors import ValidationError
from utils.file_handlers import write_vtft

logger = logging.getLogger(__name__)

TOUCH_MANIFEST = "touch.manifest"
WEB_MANIFEST = "web.manifest"
EVAL_MANIFEST = "eval.manifest"
INTERACTIVE_MANIFEST = "interactive.manifest"
SIGNATURES_FILE = "signatures.vtft"


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    categories: int = 4
    instances_per_category: int = 6
    test_instances_per_category: int = 2
    frames_per_instance: int = 5
    grid: int = 14
    patch_size: int = 16
    feature_dim: int = 32
    endpoint_noise: float = 0.0
    endpoint_floor: float = 0.4
    patch_noise: float = 0.1
    instance_variation: float = 0.2
    web_images_per_category: int = 6
    eval_scenes: int = 16
    interactive_scenes: int = 10
    min_regions: int = 2
    max_regions: int = 3

    def __post_init__(self):
        if self.categories < 2:
            raise ValidationError(f"a synthetic corpus needs at least 2 categories, got {self.categories}")
        if self.categories > self.feature_dim:
            raise ValidationError(
                f"signature collision: {self.categories} categories cannot be separated in {self.feature_dim} dims"
            )
        if min(self.instances_per_category, self.frames_per_instance, self.grid, self.patch_size) < 1:
            raise ValidationError("instance, frame, grid and patch counts must be positive")
        if self.test_instances_per_category < 0 or self.web_images_per_category < 0:
            raise ValidationError("counts must be non-negative")
        if not 0 <= self.endpoint_noise <= 1:
            raise ValidationError(f"endpoint noise must lie in [0, 1], got {self.endpoint_noise}")
        if not 0 <= self.endpoint_floor <= 1:
            raise ValidationError(f"endpoint floor must lie in [0, 1], got {self.endpoint_floor}")
        if self.patch_noise < 0 or self.instance_variation < 0:
            raise ValidationError("noise levels must be non-negative")
        if not 2 <= self.min_regions <= self.max_regions <= 3:
            raise ValidationError("scenes hold 2 or 3 material regions")
        if self.max_regions > self.categories:
            raise ValidationError(f"{self.max_regions} regions need at least as many categories")
        if self.grid < 4:
            raise ValidationError("scene grids need at least 4 patches per side")

    @property
    def endpoint_signal(self) -> float:
        """Share of the instance signature left in a first or last frame; the floor at full noise."""
        return 1.0 - self.endpoint_noise * (1.0 - self.endpoint_floor)

    @property
    def image_side(self) -> int:
        return self.grid * self.patch_size


@dataclass
class SyntheticCorpus:
    root: Path
    category_names: list
    signatures: np.ndarray
    counts: dict = field(default_factory=dict)

    def path(self, name) -> Path:
        return self.root / name


def category_names(count: int) -> list:
    return [f"material{k:02d}" for k in range(count)]


def make_signatures(spec: SyntheticCorpusSpec, seed) -> np.ndarray:
    """K zero-mean, mutually orthogonal signatures of norm sqrt(D), as a K×D array."""
    rng = np.random.default_rng([seed, 0])
    raw = rng.standard_normal((spec.feature_dim, spec.categories))
    raw -= raw.mean(axis=0, keepdims=True)
    basis, _ = np.linalg.qr(raw)
    signatures = basis.T * np.sqrt(spec.feature_dim)
    unit = signatures / np.linalg.norm(signatures, axis=1, keepdims=True)
    cosines = np.abs(unit @ unit.T - np.eye(spec.categories))
    if cosines.max() > 1 - 1e-9:
        raise ValidationError("signature collision: two category signatures are collinear")
    return signatures


def _unit_noise(rng, dim) -> np.ndarray:
    vector = rng.standard_normal(dim)
    return vector / np.linalg.norm(vector) * np.sqrt(dim)


def _layout(rng, spec: SyntheticCorpusSpec, regions: int) -> np.ndarray:
    """Region index per grid cell: a vertical cut, and for three regions a horizontal cut of one side."""
    grid = spec.grid
    labels = np.zeros((grid, grid), dtype=int)
    column = int(rng.integers(grid // 4, grid - grid // 4 + 1))
    column = min(max(column, 1), grid - 1)
    labels[:, column:] = 1
    if regions == 3:
        row = int(rng.integers(grid // 4, grid - grid // 4 + 1))
        row = min(max(row, 1), grid - 1)
        if rng.random() < 0.5:
            labels[row:, :column] = 2
        else:
            labels[row:, column:] = 2
    return labels


class _Writer:
    """Writes corpus files under one root, relative paths in manifests."""

    def __init__(self, root: Path):
        self.root = root
        for sub in ("features", "masks", "rasters"):
            (root / sub).mkdir(parents=True, exist_ok=True)

    def features(self, name, array) -> str:
        relative = f"features/{name}.vtft"
        write_vtft(array, self.root / relative)
        return relative

    def mask(self, name, pixels) -> str:
        relative = f"masks/{name}.pgm"
        save_mask(MaskImage(pixels), self.root / relative)
        return relative

    def raster(self, name, samples) -> str:
        relative = f"rasters/{name}.ppm"
        Raster(samples).save(self.root / relative)
        return relative


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, seed: int, out_dir) -> SyntheticCorpus:
    """Write manifests, VTFT features, PGM masks and PPM renders; identical bytes for identical seeds."""
    root = Path(out_dir)
    writer = _Writer(root)
    names = category_names(spec.categories)
    signatures = make_signatures(spec, seed)
    write_vtft(signatures[:, :, None].transpose(1, 0, 2), root / SIGNATURES_FILE)
    palette = np.random.default_rng([seed, 1]).integers(40, 216, size=(spec.categories, 3))

    touch_records = _touch_instances(spec, seed, names, signatures, writer)
    write_manifest(touch_records, root / TOUCH_MANIFEST)

    web_records = []
    rng = np.random.default_rng([seed, 3])
    for k, name in enumerate(names):
        for index in range(spec.web_images_per_category):
            labels, present = _scene_labels(rng, spec, required=k)
            sample_id = f"web-{name}-{index:03d}"
            features = _scene_features(rng, spec, signatures, labels, present)
            web_records.append(SampleRecord(sample_id, "web", len(web_records), name,
                                            writer.features(sample_id, features), None, "web"))
    write_manifest(web_records, root / WEB_MANIFEST)

    test_instances = {}
    for record in touch_records:
        if record.split == "test":
            test_instances.setdefault(record.category, [])
            instance_id = _instance_id_of(record, spec)
            if instance_id not in test_instances[record.category]:
                test_instances[record.category].append(instance_id)

    eval_lines = []
    rng = np.random.default_rng([seed, 4])
    for index in range(spec.eval_scenes):
        labels, present = _scene_labels(rng, spec)
        scene_id = f"scene-{index:03d}"
        features_path = writer.features(scene_id, _scene_features(rng, spec, signatures, labels, present))
        raster_path = writer.raster(scene_id, _render(spec, palette, labels, present))
        for region, k in enumerate(present):
            name = names[k]
            fields = {
                "sample_id": f"{scene_id}-{name}",
                "image_path": features_path,
                "raster_path": raster_path,
                "mask_path": writer.mask(f"{scene_id}-{name}", _pixel_mask(spec, labels == region)),
                "category": name,
            }
            linked = test_instances.get(name)
            if linked:
                fields["instance_id"] = linked[index % len(linked)]
            eval_lines.append(format_record_line(fields))
    (root / EVAL_MANIFEST).write_text("".join(line + "\n" for line in eval_lines), encoding="utf-8")

    interactive_lines = []
    rng = np.random.default_rng([seed, 5])
    for index in range(spec.interactive_scenes):
        labels, present = _scene_labels(rng, spec)
        scene_id = f"duo-{index:03d}"
        features_path = writer.features(scene_id, _scene_features(rng, spec, signatures, labels, present))
        raster_path = writer.raster(scene_id, _render(spec, palette, labels, present))
        first, second = sorted(rng.choice(len(present), size=2, replace=False).tolist())
        fields = {"sample_id": scene_id, "image_path": features_path, "raster_path": raster_path}
        for suffix, region in (("a", first), ("b", second)):
            name = names[present[region]]
            fields[f"category_{suffix}"] = name
            fields[f"mask_{suffix}"] = writer.mask(f"{scene_id}-{name}", _pixel_mask(spec, labels == region))
        interactive_lines.append(format_record_line(fields))
    (root / INTERACTIVE_MANIFEST).write_text("".join(line + "\n" for line in interactive_lines), encoding="utf-8")

    counts = {
        "touch_records": len(touch_records),
        "tactile_frames": sum(1 for r in touch_records if r.tactile_path),
        "web_images": len(web_records),
        "eval_samples": len(eval_lines),
        "interactive_samples": len(interactive_lines),
    }
    logger.info("synthetic corpus written to %s: %s", root, counts)
    return SyntheticCorpus(root, names, signatures, counts)


def _instance_id_of(record, spec) -> str:
    length = spec.frames_per_instance
    start = record.frame_index - (record.frame_index % (length + 3))
    return f"{record.video_id}:{start}-{start + length - 1}"


def _touch_instances(spec, seed, names, signatures, writer) -> list:
    """Touch instances packed two per video; train and test instances never share a video."""
    rng = np.random.default_rng([seed, 2])
    length = spec.frames_per_instance
    stride = length + 3
    records = []
    for split, per_category in (("train", spec.instances_per_category), ("test", spec.test_instances_per_category)):
        planned = [(k, n) for n in range(per_category) for k in range(len(names))]
        for slot, (k, _) in enumerate(planned):
            video_id = f"{split}-vid{slot // 2:03d}"
            start = (slot % 2) * stride
            variation = spec.instance_variation * _unit_noise(rng, spec.feature_dim)
            identity = signatures[k] + variation
            texture = spec.patch_noise * rng.standard_normal((spec.feature_dim, spec.grid, spec.grid))
            background = spec.patch_noise * rng.standard_normal((spec.feature_dim, spec.grid, spec.grid))
            for offset in range(length):
                endpoint = offset in (0, length - 1) and length > 1
                alpha = spec.endpoint_signal if endpoint else 1.0
                pressure = _unit_noise(rng, spec.feature_dim) if endpoint else np.zeros(spec.feature_dim)
                tactile = (alpha * identity + (1 - alpha) * pressure)[:, None, None] + texture
                jitter = 0.02 * rng.standard_normal((spec.feature_dim, spec.grid, spec.grid))
                visual = identity[:, None, None] + background + jitter
                sample_id = f"{video_id}-f{start + offset:04d}"
                records.append(SampleRecord(
                    sample_id=sample_id,
                    video_id=video_id,
                    frame_index=start + offset,
                    category=names[k],
                    image_path=writer.features(f"{sample_id}-image", visual),
                    tactile_path=writer.features(f"{sample_id}-touch", tactile),
                    split=split,
                ))
    return records


def _scene_labels(rng, spec, required=None) -> tuple:
    regions = int(rng.integers(spec.min_regions, spec.max_regions + 1))
    labels = _layout(rng, spec, regions)
    if required is None:
        present = rng.choice(spec.categories, size=regions, replace=False).tolist()
    else:
        others = [k for k in range(spec.categories) if k != required]
        present = [required] + rng.choice(others, size=regions - 1, replace=False).tolist()
        present = [present[i] for i in rng.permutation(regions)]
    return labels, [int(k) for k in present]


def _scene_features(rng, spec, signatures, labels, present) -> np.ndarray:
    categories = np.asarray(present)[labels]
    base = signatures[categories].transpose(2, 0, 1)
    return base + spec.patch_noise * rng.standard_normal(base.shape)


def _pixel_mask(spec, cells) -> np.ndarray:
    return np.kron(cells.astype(np.uint8), np.ones((spec.patch_size, spec.patch_size), dtype=np.uint8)) > 0


def _render(spec, palette, labels, present) -> np.ndarray:
    colors = palette[np.asarray(present)[labels]].astype(np.uint8)
    return np.repeat(np.repeat(colors, spec.patch_size, axis=0), spec.patch_size, axis=1)
