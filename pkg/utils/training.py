"""
Training loop: curriculum batches, the symmetric contrastive loss, AdamW
updates under the freeze schedule, per-step loss log and per-epoch
checkpoints with exact resume
"""

from __future__ import annotations

import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from utils.alignment import LossConfig, contrastive_loss
from utils.corpus import format_record_line, parse_record_line
from utils.encoders import EncoderConfig, Raster, encode_batch, init_dual_encoder, prepare_input
from utils.errors import FormatError, NonFiniteError, ValidationError
from utils.file_handlers import read_vtft
from utils.numeric_core import (
    MomentState,
    ParamSet,
    adamw_step,
    finite_difference_check,
    reverse_mode_gradients,
)
from utils.pairing import make_rng, sample_training_batch

logger = logging.getLogger(__name__)

LOSS_LOG = "loss.log"
CHECKPOINT_PATTERN = "ckpt-{epoch}.bin"
TACTILE_BACKBONE = "tactile.backbone."


# ── Inputs ─────────────────────────────────────────────────────────────────────

def load_item(path):
    """A VTFT feature map, or a Raster for anything else."""
    if str(path).endswith(".vtft"):
        return read_vtft(path)
    return Raster.load(path)


def flip_horizontal(item):
    if isinstance(item, Raster):
        return Raster(item.samples[:, ::-1])
    return np.ascontiguousarray(np.asarray(item)[..., ::-1])


class FeatureStore:
    """Loads visual and tactile inputs once per sample id."""

    def __init__(self, records, encoder: EncoderConfig):
        self.records = {record.sample_id: record for record in records}
        self.encoder = encoder
        self._items = {}

    def _load(self, path):
        if path not in self._items:
            self._items[path] = load_item(path)
        return self._items[path]

    def record(self, sample_id):
        try:
            return self.records[sample_id]
        except KeyError:
            raise ValidationError(f"unknown sample id {sample_id!r}") from None

    def visual(self, sample_id):
        return self._load(self.record(sample_id).image_path)

    def tactile(self, sample_id):
        record = self.record(sample_id)
        if not record.has_tactile:
            raise ValidationError(f"sample {sample_id!r} has no tactile reading")
        return self._load(record.tactile_path)

    def prepared(self, item) -> np.ndarray:
        return prepare_input(item, self.encoder)


# ── Schedule ───────────────────────────────────────────────────────────────────

def trainable_flags(names, epoch: int, frozen_epochs: int) -> dict:
    """Aligners always train; the tactile backbone from epoch F; the visual backbone never."""
    flags = {}
    for name in names:
        if ".aligner." in name:
            flags[name] = True
        elif name.startswith(TACTILE_BACKBONE):
            flags[name] = epoch >= frozen_epochs
        else:
            flags[name] = False
    return flags


# ── Checkpoints ────────────────────────────────────────────────────────────────

@dataclass
class Checkpoint:
    epoch: int
    step: int
    seed: int
    params: ParamSet
    config: dict = field(default_factory=dict)

    def save(self, path):
        payload = {
            "epoch": self.epoch,
            "step": self.step,
            "seed": self.seed,
            "values": {name: np.array(value) for name, value in self.params.values.items()},
            "trainable": dict(self.params.trainable),
            "state": {
                name: (np.array(m.first), np.array(m.second), m.step) for name, m in self.params.state.items()
            },
            "config": dict(self.config),
        }
        Path(path).write_bytes(pickle.dumps(payload, protocol=4))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            payload = pickle.loads(Path(path).read_bytes())
            state = {name: MomentState(first, second, step) for name, (first, second, step) in payload["state"].items()}
            params = ParamSet(payload["values"], payload["trainable"], state)
            return cls(payload["epoch"], payload["step"], payload["seed"], params, payload.get("config", {}))
        except (pickle.UnpicklingError, KeyError, TypeError, ValueError, EOFError) as exc:
            raise FormatError(f"not a checkpoint: {exc}", path) from exc


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / CHECKPOINT_PATTERN.format(epoch=epoch)


def latest_checkpoint(out_dir) -> Path:
    candidates = []
    for path in Path(out_dir).glob("ckpt-*.bin"):
        suffix = path.stem[len("ckpt-"):]
        if suffix.isdigit():
            candidates.append((int(suffix), path))
    if not candidates:
        raise ValidationError(f"no checkpoint found in {out_dir}")
    return max(candidates)[1]


# ── Loss log ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class LossRecord:
    step: int
    stage: int
    epoch: int
    loss: float

    def to_line(self) -> str:
        return format_record_line({"step": self.step, "stage": self.stage, "epoch": self.epoch,
                                   "loss": repr(self.loss)})


def read_loss_log(path) -> list:
    records = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = parse_record_line(line, path, number)
            try:
                records.append(LossRecord(int(fields["step"]), int(fields["stage"]),
                                          int(fields["epoch"]), float(fields["loss"])))
            except (KeyError, ValueError) as exc:
                raise FormatError(f"bad loss record: {exc}", path, number) from exc
    return records


def loss_frame(records) -> pd.DataFrame:
    return pd.DataFrame([vars(r) for r in records], columns=["step", "stage", "epoch", "loss"])


def epoch_means(records) -> dict:
    frame = loss_frame(records)
    if frame.empty:
        return {}
    return {int(epoch): float(value) for epoch, value in frame.groupby("epoch")["loss"].mean().items()}


# ── Training ───────────────────────────────────────────────────────────────────

@dataclass
class TrainSettings:
    seed: int
    encoder: EncoderConfig
    loss: LossConfig
    schedule: object
    pairing: object
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 16
    steps_per_epoch: int = 0
    augment_flip: bool = False


@dataclass
class TrainResult:
    params: ParamSet
    initial: ParamSet
    losses: list
    checkpoints: list
    out_dir: Path

    @property
    def epoch_means(self) -> dict:
        return epoch_means(self.losses)


class Trainer:
    def __init__(self, settings: TrainSettings, corpora, store: FeatureStore, out_dir, config_echo=None):
        self.settings = settings
        self.corpora = corpora
        self.store = store
        self.out_dir = Path(out_dir)
        self.config_echo = dict(config_echo or {})
        self.instances = {i.instance_id: i for group in corpora.instances.values() for i in group}
        if not self.instances:
            raise ValidationError("no touch instances to train on")
        if settings.schedule.stage2_epochs > 0 and not corpora.out_domain_categories():
            raise ValidationError("stage 2 needs an out-domain corpus sharing categories with the touch instances")

    @property
    def steps_per_epoch(self) -> int:
        if self.settings.steps_per_epoch:
            return self.settings.steps_per_epoch
        frames = sum(instance.length for instance in self.instances.values())
        return max(1, math.ceil(frames / self.settings.batch_size))

    def _inputs(self, pairs, epoch, batch_index) -> tuple:
        tactile, visual = [], []
        for slot, pair in enumerate(pairs):
            instance = self.instances[pair.tactile_instance]
            items = [self.store.tactile(instance.members[pair.tactile_offset]),
                     self.store.visual(pair.visual_sample)]
            if self.settings.augment_flip:
                for modality in range(2):
                    coin = make_rng((self.settings.seed, epoch, batch_index, slot, modality + 1))
                    if coin.random() < 0.5:
                        items[modality] = flip_horizontal(items[modality])
            tactile.append(self.store.prepared(items[0]))
            visual.append(self.store.prepared(items[1]))
        return np.stack(tactile), np.stack(visual)

    def batch_loss(self, params: ParamSet, tactile, visual):
        encoder = self.settings.encoder
        f_t = encode_batch(tactile, params, encoder, "tactile")
        f_v = encode_batch(visual, params, encoder, "visual")
        return contrastive_loss(f_t, f_v, self.settings.loss)

    def train_step(self, params: ParamSet, epoch: int, batch_index: int, step: int) -> tuple:
        s = self.settings
        pairs = sample_training_batch(self.corpora, s.schedule, epoch, s.batch_size, s.seed,
                                      batch_index, s.pairing)
        tactile, visual = self._inputs(pairs, epoch, batch_index)
        try:
            loss = self.batch_loss(params, tactile, visual)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"loss is {value}")
            grads = reverse_mode_gradients(loss, params)
        except NonFiniteError as exc:
            raise NonFiniteError(str(exc), step=step) from exc
        updated = adamw_step(params, grads, s.lr, s.beta1, s.beta2, s.eps, s.weight_decay)
        return updated, value

    def run(self, params: ParamSet = None, start_epoch: int = 0, step: int = 0, log_records=()) -> TrainResult:
        s = self.settings
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if params is None:
            params = init_dual_encoder(s.encoder, s.seed)
        initial = params
        losses = list(log_records)
        checkpoints = []
        log_path = self.out_dir / LOSS_LOG
        with open(log_path, "w", encoding="utf-8") as log:
            log.write(f"# seed={s.seed}\n")
            for record in losses:
                log.write(record.to_line() + "\n")
            for epoch in range(start_epoch, s.schedule.total_epochs):
                stage = s.schedule.stage(epoch)
                params = params.with_trainable(trainable_flags(params.names(), epoch, s.schedule.frozen_epochs))
                epoch_losses = []
                for batch_index in range(self.steps_per_epoch):
                    params, value = self.train_step(params, epoch, batch_index, step)
                    record = LossRecord(step, stage, epoch, value)
                    log.write(record.to_line() + "\n")
                    losses.append(record)
                    epoch_losses.append(value)
                    logger.debug("step %d epoch %d stage %d loss %.6f", step, epoch, stage, value)
                    step += 1
                log.flush()
                path = checkpoint_path(self.out_dir, epoch)
                Checkpoint(epoch, step, s.seed, params, self.config_echo).save(path)
                checkpoints.append(path)
                logger.info("epoch %d (stage %d): mean loss %.6f, checkpoint %s",
                            epoch, stage, float(np.mean(epoch_losses)), path.name)
        return TrainResult(params, initial, losses, checkpoints, self.out_dir)

    def resume(self, checkpoint_file) -> TrainResult:
        checkpoint = Checkpoint.load(checkpoint_file)
        if checkpoint.seed != self.settings.seed:
            raise ValidationError(f"checkpoint seed {checkpoint.seed} differs from run seed {self.settings.seed}")
        if self.config_echo and checkpoint.config and checkpoint.config != self.config_echo:
            logger.warning("resuming %s under a different configuration", checkpoint_file)
        log_path = self.out_dir / LOSS_LOG
        previous = read_loss_log(log_path) if log_path.exists() else []
        kept = [record for record in previous if record.epoch <= checkpoint.epoch]
        if len(kept) != checkpoint.step:
            raise ValidationError(
                f"loss log has {len(kept)} steps up to epoch {checkpoint.epoch}, checkpoint expects {checkpoint.step}"
            )
        logger.info("resuming from epoch %d (step %d)", checkpoint.epoch, checkpoint.step)
        return self.run(checkpoint.params, checkpoint.epoch + 1, checkpoint.step, kept)


# ── Gradient check ─────────────────────────────────────────────────────────────

GRADCHECK_ENCODER = EncoderConfig(image_side=3, patch_size=1, backbone_dim=6, shared_dim=4,
                                  backbone_kind="feature-file")


def gradient_check_pipeline(seed: int, pairs: int = 3, loss: LossConfig = LossConfig(),
                            h: float = 1e-6, tol: float = 1e-4):
    """Finite-difference check of encode -> similarity -> loss on a random batch, every tensor trainable."""
    encoder = GRADCHECK_ENCODER
    rng = np.random.default_rng([seed, 17])
    shape = (pairs, encoder.backbone_dim, encoder.grid, encoder.grid)
    tactile = rng.standard_normal(shape)
    visual = rng.standard_normal(shape)
    base = init_dual_encoder(encoder, seed)
    params = base.with_trainable({name: True for name in base.names()})

    def loss_fn(p):
        return contrastive_loss(encode_batch(tactile, p, encoder, "tactile"),
                                encode_batch(visual, p, encoder, "visual"), loss)

    return finite_difference_check(loss_fn, params, h=h, tol=tol)
