"""
Wiring between a RunConfig and the library: loading manifests and corpora,
tactile descriptors from a trained encoder, prototypes, evaluation datasets
and single-image localization
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from utils.alignment import TactileDescriptor, describe_tactile
from utils.corpus import (
    exclude_categories,
    extract_touch_instances,
    limit_instances_per_video,
    load_mask,
    parse_manifest,
    parse_record_line,
    resolve_record_paths,
)
from utils.encoders import Raster, encode
from utils.errors import FormatError, ValidationError
from utils.evaluation import (
    EncoderModel,
    InteractiveSample,
    LocalizationSample,
    compute_saliency,
    export_heatmap,
)
from utils.pairing import TrainingCorpora, compute_prototypes
from utils.synthetic import EVAL_MANIFEST, INTERACTIVE_MANIFEST, TOUCH_MANIFEST, WEB_MANIFEST
from utils.training import Checkpoint, FeatureStore, TrainSettings, latest_checkpoint, load_item

logger = logging.getLogger(__name__)


def load_records(path, excluded=()) -> list:
    records = resolve_record_paths(parse_manifest(path), Path(path).parent)
    return exclude_categories(records, excluded) if excluded else records


def touch_records(config, excluded=()) -> list:
    return load_records(config.data_path("touch_manifest", TOUCH_MANIFEST), excluded)


def split_instances(records, split: str, max_per_video=None) -> list:
    """Instances built from records tagged ``split``; untagged records count as training data."""
    wanted = {split, ""} if split == "train" else {split}
    chosen = [r for r in records if r.has_tactile and r.split in wanted]
    return limit_instances_per_video(extract_touch_instances(chosen), max_per_video)


def train_settings(config) -> TrainSettings:
    opt = config.optimizer
    return TrainSettings(
        seed=config.seed, encoder=config.encoder, loss=config.loss, schedule=config.schedule,
        pairing=config.pairing, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
        weight_decay=opt.weight_decay, batch_size=opt.batch_size, steps_per_epoch=opt.steps_per_epoch,
        augment_flip=config.augment_flip,
    )


@dataclass
class TrainingData:
    corpora: TrainingCorpora
    store: FeatureStore
    records: list


def load_training_data(config) -> TrainingData:
    records = touch_records(config)
    instances = split_instances(records, "train", config.data.max_instances_per_video)
    web = []
    if config.schedule.stage2_epochs > 0:
        web = load_records(config.data_path("web_manifest", WEB_MANIFEST))
    corpora = TrainingCorpora.build(instances, web)
    logger.info("training data: %d instances in %d categories, %d out-domain images",
                len(instances), len(corpora.categories), len(web))
    return TrainingData(corpora, FeatureStore(list(records) + list(web), config.encoder), records)


def load_checkpoint(config) -> Checkpoint:
    path = Path(config.data.checkpoint) if config.data.checkpoint else latest_checkpoint(config.out_path)
    checkpoint = Checkpoint.load(path)
    logger.info("loaded checkpoint %s (epoch %d)", path, checkpoint.epoch)
    return checkpoint


# ── Descriptors ────────────────────────────────────────────────────────────────

class TactileDescriber:
    """Sample id -> aggregated tactile descriptor under the trained tactile encoder."""

    def __init__(self, params, config, store: FeatureStore):
        self.params = params
        self.encoder = config.encoder
        self.store = store
        self._cache = {}

    def __call__(self, sample_id) -> TactileDescriptor:
        if sample_id not in self._cache:
            f_t = encode(self.store.tactile(sample_id), self.params, self.encoder, "tactile")
            self._cache[sample_id] = describe_tactile(f_t)
        return self._cache[sample_id]


def build_prototypes(params, config, records=None):
    records = touch_records(config) if records is None else records
    instances = split_instances(records, "train", config.data.max_instances_per_video)
    by_category = {}
    for instance in instances:
        by_category.setdefault(instance.category, []).append(instance)
    describer = TactileDescriber(params, config, FeatureStore(records, config.encoder))
    return compute_prototypes(by_category, describer)


@dataclass
class EvaluationContext:
    """Everything a scoring command needs: model, prototypes, test instances and a describer."""

    config: object
    params: object
    model: EncoderModel
    prototypes: object
    test_instances: dict
    describer: TactileDescriber

    def descriptor(self, category: str, instance_id=None, linked: bool = True):
        """Frame descriptor of the linked test instance, or the category prototype.

        With ``linked=False`` a sample without an instance falls back to the prototype.
        """
        cfg = self.config.evaluation
        if cfg.descriptor == "frame" and (linked or instance_id is not None):
            instance = self.test_instances.get(instance_id)
            if instance is None:
                raise ValidationError(f"frame descriptors need a linked touch instance, got {instance_id!r}")
            return self.describer(instance.members[len(instance.members) // 2])
        try:
            return self.prototypes[category].at(cfg.frame_position)
        except KeyError:
            raise ValidationError(f"no prototype for category {category!r}") from None


def evaluation_context(config, checkpoint: Checkpoint = None) -> EvaluationContext:
    checkpoint = checkpoint or load_checkpoint(config)
    records = touch_records(config)
    prototypes = build_prototypes(checkpoint.params, config, records)
    tests = split_instances(records, "test")
    describer = TactileDescriber(checkpoint.params, config, FeatureStore(records, config.encoder))
    model = EncoderModel(checkpoint.params, config.encoder, config.loss)
    return EvaluationContext(config, checkpoint.params, model, prototypes,
                             {i.instance_id: i for i in tests}, describer)


# ── Evaluation datasets ────────────────────────────────────────────────────────

def _read_lines(path, required) -> list:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = parse_record_line(line, path, number)
            missing = [key for key in required if not fields.get(key)]
            if missing:
                raise FormatError(f"missing fields {missing}", path, number)
            rows.append(fields)
    return rows


class _ItemCache:
    def __init__(self, base: Path):
        self.base = base
        self._items = {}

    def resolve(self, value) -> Path:
        candidate = Path(value)
        return candidate if candidate.is_absolute() else self.base / candidate

    def item(self, value):
        path = self.resolve(value)
        if path not in self._items:
            self._items[path] = load_item(path)
        return self._items[path]


def _visual_path(fields, config) -> str:
    if config.encoder.backbone_kind == "random-projection" and fields.get("raster_path"):
        return fields["raster_path"]
    return fields["image_path"]


def load_eval_dataset(config, context: EvaluationContext = None, descriptors: bool = True) -> list:
    path = config.data_path("eval_manifest", EVAL_MANIFEST)
    cache = _ItemCache(Path(path).parent)
    samples = []
    for fields in _read_lines(path, ("sample_id", "image_path", "mask_path", "category")):
        descriptor = None
        if descriptors and context is not None:
            descriptor = context.descriptor(fields["category"], fields.get("instance_id"))
        samples.append(LocalizationSample(
            sample_id=fields["sample_id"],
            category=fields["category"],
            visual=cache.item(_visual_path(fields, config)),
            descriptor=descriptor,
            mask=load_mask(cache.resolve(fields["mask_path"])),
            instance_id=fields.get("instance_id"),
        ))
    return samples


def load_interactive_dataset(config, context: EvaluationContext) -> list:
    path = config.data_path("interactive_manifest", INTERACTIVE_MANIFEST)
    cache = _ItemCache(Path(path).parent)
    required = ("sample_id", "image_path", "category_a", "mask_a", "category_b", "mask_b")
    samples = []
    for fields in _read_lines(path, required):
        categories = (fields["category_a"], fields["category_b"])
        samples.append(InteractiveSample(
            sample_id=fields["sample_id"],
            visual=cache.item(_visual_path(fields, config)),
            descriptors=tuple(context.descriptor(c, linked=False) for c in categories),
            masks=(load_mask(cache.resolve(fields["mask_a"])), load_mask(cache.resolve(fields["mask_b"]))),
            categories=categories,
        ))
    return samples


# ── Localization ───────────────────────────────────────────────────────────────

def localize(config, params, image_path, descriptor, out_path, raster_path=None) -> dict:
    """Saliency of one image for one tactile descriptor; writes the heatmap (and overlay with a raster)."""
    visual = load_item(image_path)
    base = Raster.load(raster_path) if raster_path else None
    if base is not None:
        width, height = base.width, base.height
    elif isinstance(visual, Raster):
        width, height = visual.width, visual.height
    else:
        width = height = config.encoder.image_side
    f_v = encode(visual, params, config.encoder, "visual").data
    saliency = compute_saliency(f_v, descriptor, config.loss, width, height,
                                sample_id=Path(image_path).stem)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if base is None:
        base = Raster(np.zeros((height, width), dtype=np.uint8))
    gray, overlay = export_heatmap(saliency, base, out_path)
    logger.info("heatmap written to %s", gray)
    return {"saliency": saliency, "heatmap": gray, "overlay": overlay}
