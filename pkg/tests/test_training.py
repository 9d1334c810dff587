from dataclasses import replace

import numpy as np
import pytest

from utils import pipeline
from utils.encoders import backbone_names
from utils.errors import FormatError, ValidationError
from utils.pairing import CurriculumSchedule, TrainingCorpora
from utils.training import (
    LOSS_LOG,
    Checkpoint,
    LossRecord,
    Trainer,
    checkpoint_path,
    gradient_check_pipeline,
    latest_checkpoint,
    read_loss_log,
    trainable_flags,
)

ECHO = {"run": "tiny"}


def _trainer(config, out_dir, **settings):
    data = pipeline.load_training_data(config)
    return Trainer(replace(pipeline.train_settings(config), **settings), data.corpora, data.store, out_dir, ECHO)


def test_trainable_flags_follow_the_freeze_schedule():
    names = ["visual.backbone.weight", "visual.aligner.gamma", "tactile.backbone.bias", "tactile.aligner.weight"]
    assert trainable_flags(names, 0, 2) == {
        "visual.backbone.weight": False, "visual.aligner.gamma": True,
        "tactile.backbone.bias": False, "tactile.aligner.weight": True,
    }
    assert trainable_flags(names, 2, 2)["tactile.backbone.bias"] is True
    assert trainable_flags(names, 50, 2)["visual.backbone.weight"] is False


def test_training_respects_frozen_backbones(tiny_config, tmp_path):
    result = _trainer(tiny_config, tmp_path / "run").run()
    initial, final = result.initial, result.params
    for name in backbone_names("visual"):
        assert np.array_equal(final[name], initial[name])
    first_epoch = Checkpoint.load(checkpoint_path(tmp_path / "run", 0)).params
    for name in backbone_names("tactile"):
        assert np.array_equal(first_epoch[name], initial[name])
    assert not np.array_equal(final["tactile.backbone.weight"], initial["tactile.backbone.weight"])
    assert not np.array_equal(final["visual.aligner.weight"], initial["visual.aligner.weight"])


def test_loss_log_and_checkpoints(tiny_config, tmp_path):
    result = _trainer(tiny_config, tmp_path / "run").run()
    log_path = tmp_path / "run" / LOSS_LOG
    assert log_path.read_text().startswith("# seed=3\n")
    records = read_loss_log(log_path)
    assert records == result.losses
    assert [r.step for r in records] == list(range(6))
    assert [r.stage for r in records] == [1, 1, 1, 1, 2, 2]
    assert all(np.isfinite(r.loss) and r.loss > 0 for r in records)
    assert [p.name for p in result.checkpoints] == ["ckpt-0.bin", "ckpt-1.bin", "ckpt-2.bin"]
    assert latest_checkpoint(tmp_path / "run").name == "ckpt-2.bin"
    checkpoint = Checkpoint.load(result.checkpoints[-1])
    assert (checkpoint.epoch, checkpoint.step, checkpoint.seed, checkpoint.config) == (2, 6, 3, ECHO)
    assert sorted(result.epoch_means) == [0, 1, 2]


def test_identical_runs_are_bit_identical(tiny_config, tmp_path):
    _trainer(tiny_config, tmp_path / "a").run()
    _trainer(tiny_config, tmp_path / "b").run()
    assert (tmp_path / "a" / LOSS_LOG).read_bytes() == (tmp_path / "b" / LOSS_LOG).read_bytes()
    for epoch in range(3):
        assert checkpoint_path(tmp_path / "a", epoch).read_bytes() == checkpoint_path(tmp_path / "b", epoch).read_bytes()


def test_flip_augmentation_is_seeded(make_config, tmp_path):
    config = make_config(augment_flip="true")
    first = _trainer(config, tmp_path / "a").run()
    second = _trainer(config, tmp_path / "b").run()
    assert [r.loss for r in first.losses] == [r.loss for r in second.losses]


def test_resume_continues_the_interrupted_run(make_config, tmp_path):
    config = make_config(stage1_epochs=3, stage2_epochs=2)
    _trainer(config, tmp_path / "full").run()
    interrupted = replace(config.schedule, stage2_epochs=0)
    _trainer(config, tmp_path / "resumed", schedule=interrupted).run()
    result = _trainer(config, tmp_path / "resumed").resume(checkpoint_path(tmp_path / "resumed", 2))
    assert len(result.losses) == 10
    assert (tmp_path / "full" / LOSS_LOG).read_bytes() == (tmp_path / "resumed" / LOSS_LOG).read_bytes()
    assert checkpoint_path(tmp_path / "full", 4).read_bytes() == checkpoint_path(tmp_path / "resumed", 4).read_bytes()


def test_resume_rejects_other_seed(tiny_config, tmp_path):
    _trainer(tiny_config, tmp_path / "run").run()
    with pytest.raises(ValidationError, match="seed"):
        _trainer(tiny_config, tmp_path / "run", seed=4).resume(checkpoint_path(tmp_path / "run", 0))


def test_resume_rejects_truncated_log(tiny_config, tmp_path):
    _trainer(tiny_config, tmp_path / "run").run()
    (tmp_path / "run" / LOSS_LOG).write_text("# seed=3\n")
    with pytest.raises(ValidationError, match="loss log"):
        _trainer(tiny_config, tmp_path / "run").resume(checkpoint_path(tmp_path / "run", 1))


def test_stage_two_needs_out_domain_images(tiny_config, tmp_path):
    data = pipeline.load_training_data(tiny_config)
    corpora = TrainingCorpora.build([i for group in data.corpora.instances.values() for i in group])
    with pytest.raises(ValidationError, match="out-domain"):
        Trainer(pipeline.train_settings(tiny_config), corpora, data.store, tmp_path)


def test_stage_one_only_run_skips_web_manifest(make_config, tmp_path):
    config = make_config(stage2_epochs=0)
    data = pipeline.load_training_data(config)
    assert data.corpora.out_domain == {}
    result = Trainer(pipeline.train_settings(config), data.corpora, data.store, tmp_path / "run").run()
    assert {r.stage for r in result.losses} == {1}


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "ckpt-0.bin"
    path.write_bytes(b"not a pickle")
    with pytest.raises(FormatError):
        Checkpoint.load(path)
    with pytest.raises(ValidationError):
        latest_checkpoint(tmp_path / "empty")


def test_loss_log_rejects_bad_records(tmp_path):
    path = tmp_path / LOSS_LOG
    path.write_text(LossRecord(0, 1, 0, 0.5).to_line() + "\nstep=1\tstage=1\n")
    with pytest.raises(FormatError):
        read_loss_log(path)


@pytest.mark.parametrize("seed", range(20))
def test_pipeline_gradients_match_finite_differences(seed):
    report = gradient_check_pipeline(seed)
    assert report.passed, report.failures[:3]
    assert report.checked > 0
