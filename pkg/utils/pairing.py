"""
Positive-pair construction (touch-instance, in-domain, out-domain),
curriculum batch sampling, frame selection and category prototypes
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from utils.alignment import TactileDescriptor
from utils.corpus import format_record_line
from utils.errors import ValidationError

PAIR_KINDS = ("instance", "in-domain", "out-domain")
TACTILE_POOLS = ("all", "middle")


class FramePosition(enum.Enum):
    START = "Start"
    MIDDLE = "Middle"
    END = "End"

    @classmethod
    def parse(cls, text: str) -> "FramePosition":
        for position in cls:
            if position.value.lower() == str(text).lower():
                return position
        raise ValidationError(f"unknown frame position {text!r}")


@dataclass(frozen=True)
class PairSpec:
    tactile_instance: str
    tactile_offset: int
    visual_sample: str
    kind: str
    category: str
    visual_instance: str | None = None

    def to_line(self) -> str:
        return format_record_line({
            "kind": self.kind,
            "tactile": f"{self.tactile_instance}#{self.tactile_offset}",
            "visual": self.visual_sample,
            "category": self.category,
        })


@dataclass(frozen=True)
class CurriculumSchedule:
    stage1_epochs: int = 20
    stage2_epochs: int = 10
    out_domain_ratio: float = 0.5
    frozen_epochs: int = 2

    def __post_init__(self):
        if min(self.stage1_epochs, self.stage2_epochs, self.frozen_epochs) < 0:
            raise ValidationError("epoch counts must be non-negative")
        if not 0 <= self.out_domain_ratio <= 1:
            raise ValidationError(f"out-domain ratio must lie in [0, 1], got {self.out_domain_ratio}")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs

    def stage(self, epoch: int) -> int:
        return 1 if epoch < self.stage1_epochs else 2


@dataclass(frozen=True)
class PairingConfig:
    instance_pairing: bool = True
    in_domain: bool = True
    tactile_frames: str = "all"

    def __post_init__(self):
        if not (self.instance_pairing or self.in_domain):
            raise ValidationError("enable at least one of instance pairing and in-domain pairing")
        if self.tactile_frames not in TACTILE_POOLS:
            raise ValidationError(f"tactile_frames must be one of {TACTILE_POOLS}")


@dataclass
class TrainingCorpora:
    """Touch instances and unpaired out-domain images, indexed by category."""

    instances: dict
    out_domain: dict = field(default_factory=dict)

    @classmethod
    def build(cls, instances, out_domain_records=()) -> "TrainingCorpora":
        by_category = {}
        for instance in instances:
            by_category.setdefault(instance.category, []).append(instance)
        images = {}
        for record in out_domain_records:
            if record.has_tactile:
                raise ValidationError(f"out-domain record {record.sample_id!r} has a tactile path")
            images.setdefault(record.category, []).append(record)
        return cls(dict(sorted(by_category.items())), dict(sorted(images.items())))

    @property
    def categories(self) -> list:
        return list(self.instances)

    def out_domain_categories(self) -> list:
        return [c for c in self.out_domain if self.instances.get(c)]

    def instance(self, instance_id):
        for group in self.instances.values():
            for instance in group:
                if instance.instance_id == instance_id:
                    return instance
        raise KeyError(instance_id)


def make_rng(seed) -> np.random.Generator:
    """Generator from an int, a counter tuple like (seed, epoch, batch, slot), or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng(list(seed))
    return np.random.default_rng(seed)


# ── Frame selection ────────────────────────────────────────────────────────────

def middle_offset(length: int) -> int:
    return length // 2


def select_frame(instance, position: FramePosition) -> str:
    if not instance.members:
        raise ValidationError(f"instance {instance.instance_id!r} is empty")
    if position is FramePosition.START:
        return instance.members[0]
    if position is FramePosition.END:
        return instance.members[-1]
    return instance.members[middle_offset(len(instance.members))]


def interior_members(instance) -> tuple:
    """Non-endpoint frames for T > 2, else the single ⌊T/2⌋ frame."""
    if instance.length > 2:
        return instance.members[1:-1]
    return (instance.members[middle_offset(instance.length)],)


def _tactile_offset(instance, rng, pool: str) -> int:
    if pool == "middle" and instance.length > 2:
        return 1 + int(rng.integers(instance.length - 2))
    return int(rng.integers(instance.length))


# ── Pair strategies ────────────────────────────────────────────────────────────

def pair_touch_instance(instance, seed, tactile_frames="all") -> PairSpec:
    """Tactile frame j and visual frame i drawn independently from one instance."""
    if not instance.members:
        raise ValidationError(f"instance {instance.instance_id!r} is empty")
    rng = make_rng(seed)
    tactile = _tactile_offset(instance, rng, tactile_frames)
    visual = int(rng.integers(instance.length))
    return PairSpec(instance.instance_id, tactile, instance.members[visual], "instance",
                    instance.category, instance.instance_id)


def pair_in_domain(instances, seed, tactile_frames="all") -> PairSpec:
    """Tactile from instance n and visual from instance m of the same category (n = m allowed)."""
    instances = list(instances)
    if not instances:
        raise ValidationError("in-domain pairing needs at least one instance")
    categories = {instance.category for instance in instances}
    if len(categories) != 1:
        raise ValidationError(f"in-domain instances span several categories {sorted(categories)}")
    rng = make_rng(seed)
    source = instances[int(rng.integers(len(instances)))]
    target = instances[int(rng.integers(len(instances)))]
    tactile = _tactile_offset(source, rng, tactile_frames)
    visual = int(rng.integers(target.length))
    return PairSpec(source.instance_id, tactile, target.members[visual], "in-domain",
                    source.category, target.instance_id)


def pair_out_domain(record, instances, seed, tactile_frames="all") -> PairSpec:
    """An unpaired image matched with a tactile frame from an instance of its category."""
    if record.has_tactile:
        raise ValidationError(f"out-domain record {record.sample_id!r} has a tactile path")
    matching = [instance for instance in instances if instance.category == record.category]
    if not matching:
        raise ValidationError(f"no touch instance of category {record.category!r} for {record.sample_id!r}")
    rng = make_rng(seed)
    source = matching[int(rng.integers(len(matching)))]
    tactile = _tactile_offset(source, rng, tactile_frames)
    return PairSpec(source.instance_id, tactile, record.sample_id, "out-domain", record.category)


def _stage_one_pair(corpora, rng, pairing: PairingConfig) -> PairSpec:
    category = corpora.categories[int(rng.integers(len(corpora.categories)))]
    group = corpora.instances[category]
    use_instance = pairing.instance_pairing
    if pairing.instance_pairing and pairing.in_domain:
        use_instance = rng.random() < 0.5
    if use_instance:
        instance = group[int(rng.integers(len(group)))]
        return pair_touch_instance(instance, rng, pairing.tactile_frames)
    return pair_in_domain(group, rng, pairing.tactile_frames)


def sample_training_batch(corpora: TrainingCorpora, schedule: CurriculumSchedule, epoch: int,
                          batch_size: int, seed: int, batch_index: int = 0,
                          pairing: PairingConfig = PairingConfig()) -> list:
    """Draw ``batch_size`` pairs; every slot uses its own (seed, epoch, batch, slot) generator."""
    if batch_size < 1:
        raise ValidationError(f"batch size must be at least 1, got {batch_size}")
    if not corpora.categories:
        raise ValidationError("no touch instances to sample from")
    stage = schedule.stage(epoch)
    out_categories = corpora.out_domain_categories()
    if stage == 2 and not out_categories:
        raise ValidationError("stage 2 needs an out-domain corpus with categories shared by touch instances")
    pairs = []
    for slot in range(batch_size):
        rng = make_rng((seed, epoch, batch_index, slot))
        if stage == 2 and rng.random() < schedule.out_domain_ratio:
            category = out_categories[int(rng.integers(len(out_categories)))]
            images = corpora.out_domain[category]
            record = images[int(rng.integers(len(images)))]
            pairs.append(pair_out_domain(record, corpora.instances[category], rng, pairing.tactile_frames))
        elif stage == 2 and pairing.in_domain:
            category = corpora.categories[int(rng.integers(len(corpora.categories)))]
            pairs.append(pair_in_domain(corpora.instances[category], rng, pairing.tactile_frames))
        else:
            pairs.append(_stage_one_pair(corpora, rng, pairing))
    return pairs


# ── Prototypes ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CategoryPrototype:
    start: TactileDescriptor
    middle: TactileDescriptor
    end: TactileDescriptor
    overall: TactileDescriptor
    instance_count: int

    def at(self, position: str) -> TactileDescriptor:
        return {"start": self.start, "middle": self.middle, "end": self.end, "all": self.overall}[position]


@dataclass(frozen=True)
class PrototypeTable:
    entries: dict

    @property
    def category_count(self) -> int:
        return len(self.entries)

    def __getitem__(self, category) -> CategoryPrototype:
        return self.entries[category]

    def to_lines(self) -> list:
        lines = []
        for category, entry in self.entries.items():
            for position in ("start", "middle", "end", "all"):
                values = " ".join(repr(float(v)) for v in entry.at(position).values)
                lines.append(format_record_line({
                    "category": category, "position": position,
                    "instances": entry.instance_count, "values": values,
                }))
        return lines


def compute_prototypes(instances_by_category: dict, describe) -> PrototypeTable:
    """Per-category mean descriptor of the start, middle and end frames, and their mean.

    ``describe`` maps a sample id to the aggregated tactile descriptor vector.
    """
    entries = {}
    for category in sorted(instances_by_category):
        group = sorted(instances_by_category[category], key=lambda instance: instance.instance_id)
        if not group:
            raise ValidationError(f"category {category!r} has no touch instances")
        sums = {}
        for position in FramePosition:
            vectors = [np.asarray(_values(describe(select_frame(i, position))), dtype=np.float64) for i in group]
            sums[position] = np.sum(vectors, axis=0) / len(group)
        start, middle, end = sums[FramePosition.START], sums[FramePosition.MIDDLE], sums[FramePosition.END]
        entries[category] = CategoryPrototype(
            start=TactileDescriptor(start, "prototype"),
            middle=TactileDescriptor(middle, "prototype"),
            end=TactileDescriptor(end, "prototype"),
            overall=TactileDescriptor((start + middle + end) / 3, "prototype"),
            instance_count=len(group),
        )
    return PrototypeTable(entries)


def _values(descriptor):
    return descriptor.values if isinstance(descriptor, TactileDescriptor) else descriptor
