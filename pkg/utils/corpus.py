"""
Corpus data model and pipeline: manifests, touch-instance extraction,
video-disjoint splits, masks, duplicate removal, concept queries and
prompt-argmax filtering
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.metrics.pairwise import cosine_similarity

from utils.errors import FormatError, ValidationError
from utils.file_handlers import read_netpbm, read_vtft, write_netpbm

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("sample_id", "video_id", "frame_index", "category", "image_path", "tactile_path", "split")
REQUIRED_FIELDS = ("sample_id", "video_id", "frame_index", "category", "image_path")


# ── Records ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    video_id: str
    frame_index: int
    category: str
    image_path: str
    tactile_path: str | None = None
    split: str = ""

    @property
    def has_tactile(self) -> bool:
        return bool(self.tactile_path)


@dataclass(frozen=True)
class TouchInstance:
    """A contiguous same-video, same-category run of frames."""

    instance_id: str
    video_id: str
    category: str
    start: int
    end: int
    members: tuple

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def parse_record_line(line: str, path=None, line_number=None) -> dict:
    """Split a ``key=value<TAB>key=value`` line into a dict."""
    fields = {}
    for token in line.rstrip("\r\n").split("\t"):
        if not token:
            continue
        key, sep, value = token.partition("=")
        if not sep or not key:
            raise FormatError(f"expected key=value, got {token!r}", path, line_number)
        if key in fields:
            raise FormatError(f"repeated key {key!r}", path, line_number)
        fields[key] = value
    return fields


def format_record_line(fields: dict) -> str:
    return "\t".join(f"{key}={value}" for key, value in fields.items())


def _record_from_fields(fields, path, line_number) -> SampleRecord:
    unknown = set(fields) - set(MANIFEST_FIELDS)
    if unknown:
        raise FormatError(f"unknown manifest keys {sorted(unknown)}", path, line_number)
    missing = [key for key in REQUIRED_FIELDS if not fields.get(key)]
    if missing:
        raise FormatError(f"missing manifest keys {missing}", path, line_number)
    try:
        frame_index = int(fields["frame_index"])
    except ValueError:
        raise FormatError(f"frame_index {fields['frame_index']!r} is not an integer", path, line_number)
    if frame_index < 0:
        raise FormatError(f"frame_index must be non-negative, got {frame_index}", path, line_number)
    return SampleRecord(
        sample_id=fields["sample_id"],
        video_id=fields["video_id"],
        frame_index=frame_index,
        category=fields["category"],
        image_path=fields["image_path"],
        tactile_path=fields.get("tactile_path") or None,
        split=fields.get("split", ""),
    )


def parse_manifest(path, categories=None) -> list:
    """Read a manifest; rejects duplicate (video_id, frame_index) and, if given, unknown categories."""
    records = []
    seen = {}
    sample_ids = set()
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            record = _record_from_fields(parse_record_line(line, path, line_number), path, line_number)
            key = (record.video_id, record.frame_index)
            if key in seen:
                raise FormatError(
                    f"duplicate video/frame {key} (first on line {seen[key]})", path, line_number
                )
            if record.sample_id in sample_ids:
                raise FormatError(f"duplicate sample_id {record.sample_id!r}", path, line_number)
            if categories is not None and record.category not in categories:
                raise FormatError(f"unknown category {record.category!r}", path, line_number)
            seen[key] = line_number
            sample_ids.add(record.sample_id)
            records.append(record)
    return records


def serialize_manifest(records) -> str:
    lines = []
    for record in records:
        fields = {
            "sample_id": record.sample_id,
            "video_id": record.video_id,
            "frame_index": record.frame_index,
            "category": record.category,
            "image_path": record.image_path,
        }
        if record.tactile_path:
            fields["tactile_path"] = record.tactile_path
        if record.split:
            fields["split"] = record.split
        lines.append(format_record_line(fields))
    return "".join(line + "\n" for line in lines)


def write_manifest(records, path):
    Path(path).write_text(serialize_manifest(records), encoding="utf-8")


def resolve_record_paths(records, base_dir) -> list:
    """Make relative image/tactile paths relative to ``base_dir``."""
    base = Path(base_dir)

    def resolve(value):
        if not value:
            return value
        candidate = Path(value)
        return str(candidate if candidate.is_absolute() else base / candidate)

    return [replace(r, image_path=resolve(r.image_path), tactile_path=resolve(r.tactile_path)) for r in records]


def records_frame(records) -> pd.DataFrame:
    return pd.DataFrame([vars(record) for record in records], columns=list(MANIFEST_FIELDS))


def exclude_categories(records, names) -> list:
    """Drop records whose category is listed (e.g. ambiguous or catch-all labels)."""
    names = set(names)
    kept = [record for record in records if record.category not in names]
    if len(kept) != len(records):
        logger.info("excluded %d records in categories %s", len(records) - len(kept), sorted(names))
    return kept


# ── Touch instances ────────────────────────────────────────────────────────────

def extract_touch_instances(records) -> list:
    """Merge maximal runs of consecutive frames with one label, per video."""
    ordered = sorted(records, key=lambda r: (r.video_id, r.frame_index))
    instances = []
    run = []
    for record in ordered:
        if run:
            last = run[-1]
            contiguous = (
                record.video_id == last.video_id
                and record.frame_index == last.frame_index + 1
                and record.category == last.category
            )
            if not contiguous:
                instances.append(_instance_from_run(run))
                run = []
        run.append(record)
    if run:
        instances.append(_instance_from_run(run))
    return instances


def _instance_from_run(run) -> TouchInstance:
    first, last = run[0], run[-1]
    return TouchInstance(
        instance_id=f"{first.video_id}:{first.frame_index}-{last.frame_index}",
        video_id=first.video_id,
        category=first.category,
        start=first.frame_index,
        end=last.frame_index,
        members=tuple(record.sample_id for record in run),
    )


def format_instance_line(instance: TouchInstance) -> str:
    return format_record_line({
        "instance_id": instance.instance_id,
        "video_id": instance.video_id,
        "category": instance.category,
        "start": instance.start,
        "end": instance.end,
        "length": instance.length,
    })


def instance_length_histogram(instances) -> pd.DataFrame:
    lengths = pd.Series([instance.length for instance in instances], dtype="int64", name="length")
    counts = lengths.value_counts().sort_index()
    return pd.DataFrame({"length": counts.index.astype("int64"), "instances": counts.values})


def limit_instances_per_video(instances, max_per_video=None) -> list:
    """Keep at most ``max_per_video`` instances per (video, category), earliest first."""
    if max_per_video is None:
        return list(instances)
    if max_per_video < 1:
        raise ValidationError(f"max_per_video must be at least 1, got {max_per_video}")
    kept = []
    counts = {}
    for instance in sorted(instances, key=lambda i: (i.video_id, i.start)):
        key = (instance.video_id, instance.category)
        if counts.get(key, 0) < max_per_video:
            counts[key] = counts.get(key, 0) + 1
            kept.append(instance)
    return kept


def split_by_video(instances, test_fraction: float, seed) -> tuple:
    """Assign whole videos to the test split so its instance share is closest to ``test_fraction``."""
    if not 0 < test_fraction < 1:
        raise ValidationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    per_video = {}
    for instance in instances:
        per_video[instance.video_id] = per_video.get(instance.video_id, 0) + 1
    videos = sorted(per_video)
    if len(videos) < 2:
        raise ValidationError(f"a video-disjoint split needs at least 2 videos, got {len(videos)}")
    order = [videos[i] for i in np.random.default_rng(seed).permutation(len(videos))]
    total_count = sum(per_video.values())
    best_k, best_gap, running = 1, None, 0
    for k in range(1, len(order)):
        running += per_video[order[k - 1]]
        gap = abs(running / total_count - test_fraction)
        if best_gap is None or gap < best_gap:
            best_k, best_gap = k, gap
    test_videos = set(order[:best_k])
    train = [i for i in instances if i.video_id not in test_videos]
    test = [i for i in instances if i.video_id in test_videos]
    logger.info("split %d videos: %d train / %d test instances", len(videos), len(train), len(test))
    return train, test


# ── Files ──────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DedupResult:
    kept: list
    dropped: list  # (path, kept twin)


def dedup_by_content_hash(paths) -> DedupResult:
    """Keep the first file of each distinct byte content, in input order."""
    first_seen = {}
    kept, dropped = [], []
    for path in paths:
        try:
            digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        except OSError as exc:
            raise ValidationError(f"cannot read {path}: {exc}") from exc
        if digest in first_seen:
            dropped.append((path, first_seen[digest]))
        else:
            first_seen[digest] = path
            kept.append(path)
    return DedupResult(kept, dropped)


@dataclass(frozen=True)
class MaskImage:
    """Binary region membership, H×W."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=bool)
        if pixels.ndim != 2 or 0 in pixels.shape:
            raise ValidationError(f"mask must be a non-empty H×W array, got {pixels.shape}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def area(self) -> int:
        return int(self.pixels.sum())


def load_mask(path) -> MaskImage:
    return MaskImage(read_netpbm(path, magic=b"P5") != 0)


def save_mask(mask: MaskImage, path):
    write_netpbm(np.where(mask.pixels, 255, 0).astype(np.uint8), path)


# ── Concept queries and prompt filtering ───────────────────────────────────────

def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def emit_concept_query_templates(category: str, objects=(), places=()) -> list:
    """Scene queries "<category> <object> in a <place>" followed by close-up queries."""
    category = category.strip()
    if not category:
        raise ValidationError("category must not be empty")
    subjects = [f"{category} {obj.strip()}" for obj in objects] or [category]
    queries = [f"{subject} in {_article(place)} {place.strip()}" for subject in subjects for place in places]
    queries += [f"A close-up shot of {subject}" for subject in subjects]
    return queries


@dataclass(frozen=True)
class PromptSet:
    category: str
    positive: str
    negatives: tuple
    embeddings: dict

    def __post_init__(self):
        if not self.negatives:
            raise ValidationError(f"prompt set for {self.category!r} needs at least one negative prompt")
        prompts = (self.positive, *self.negatives)
        missing = [p for p in prompts if p not in self.embeddings]
        if missing:
            raise ValidationError(f"no embedding for prompts {missing}")
        dims = {np.asarray(self.embeddings[p]).reshape(-1).shape[0] for p in prompts}
        if len(dims) != 1:
            raise ValidationError(f"prompt embeddings have differing dimensions {sorted(dims)}")

    @property
    def prompts(self) -> tuple:
        return (self.positive, *self.negatives)

    def matrix(self) -> np.ndarray:
        return np.stack([np.asarray(self.embeddings[p], dtype=np.float64).reshape(-1) for p in self.prompts])


@dataclass(frozen=True)
class FilterResult:
    retained: list
    rejected: list  # (image id, winning negative prompt)


def filter_by_prompt_argmax(image_embeddings, prompts: PromptSet) -> FilterResult:
    """Retain an image iff its positive-prompt cosine beats every negative strictly."""
    prompt_matrix = prompts.matrix()
    if np.any(np.linalg.norm(prompt_matrix, axis=1) == 0):
        raise ValidationError("a prompt embedding has zero norm")
    ids, vectors = [], []
    for image_id, vector in image_embeddings:
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.shape[0] != prompt_matrix.shape[1]:
            raise ValidationError(
                f"embedding for {image_id!r} has dimension {vector.shape[0]}, prompts have {prompt_matrix.shape[1]}"
            )
        if not np.all(np.isfinite(vector)):
            raise ValidationError(f"embedding for {image_id!r} is not finite")
        if not np.any(vector):
            raise ValidationError(f"embedding for {image_id!r} has zero norm")
        ids.append(image_id)
        vectors.append(vector)
    if not ids:
        return FilterResult([], [])
    scores = cosine_similarity(np.stack(vectors), prompt_matrix)
    retained, rejected = [], []
    for image_id, row in zip(ids, scores):
        best_negative = int(np.argmax(row[1:]))
        if row[0] > row[1 + best_negative]:
            retained.append(image_id)
        else:
            rejected.append((image_id, prompts.negatives[best_negative]))
    return FilterResult(retained, rejected)


def _embedding_from_file(path) -> np.ndarray:
    return read_vtft(path).reshape(-1)


def load_prompt_set(path) -> PromptSet:
    """Read ``category``/``positive``/``negative`` lines; embeddings are VTFT files (H=W=1)."""
    base = Path(path).parent
    category, positive, negatives, embeddings = None, None, [], {}
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\r\n").split("\t")
            role = parts[0]
            if role == "category" and len(parts) == 2:
                category = parts[1]
            elif role in ("positive", "negative") and len(parts) == 3:
                text, embedding_path = parts[1], base / parts[2]
                embeddings[text] = _embedding_from_file(embedding_path)
                if role == "positive":
                    if positive is not None:
                        raise FormatError("more than one positive prompt", path, line_number)
                    positive = text
                else:
                    negatives.append(text)
            else:
                raise FormatError(f"unrecognised prompt line {line.strip()!r}", path, line_number)
    if category is None or positive is None:
        raise FormatError("prompt set needs a category and a positive prompt", path)
    return PromptSet(category, positive, tuple(negatives), embeddings)


def load_embedding_list(path) -> list:
    """Read ``id<TAB>embedding.vtft`` lines into (id, vector) pairs."""
    base = Path(path).parent
    pairs = []
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 2:
                raise FormatError("expected id<TAB>path", path, line_number)
            pairs.append((parts[0], _embedding_from_file(base / parts[1])))
    return pairs
