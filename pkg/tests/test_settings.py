import pytest

from config.settings import PRESETS, build_run_config, load_run_config, read_config_file
from utils.errors import ValidationError


def test_desk_preset_is_the_default():
    config = load_run_config(environ={})
    assert config.optimizer.lr == 1e-3
    assert config.optimizer.batch_size == 16
    assert (config.schedule.stage1_epochs, config.schedule.stage2_epochs) == (20, 10)
    assert config.schedule.frozen_epochs == 2
    assert config.encoder.backbone_kind == "feature-file"


def test_full_scale_preset():
    config = load_run_config(overrides={"preset": "paper"}, environ={})
    assert (config.optimizer.lr, config.optimizer.batch_size) == (1e-5, 64)
    assert (config.schedule.stage1_epochs, config.schedule.stage2_epochs, config.schedule.frozen_epochs) == (100, 50, 3)
    assert set(PRESETS) == {"desk", "paper"}


def test_config_file_overrides_preset(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# desk run\nlr = 0.01\nthreshold = 0.4  # looser\n\ncosine = false\n")
    config = load_run_config(path, environ={})
    assert config.optimizer.lr == 0.01
    assert config.evaluation.threshold == 0.4
    assert config.loss.cosine is False


def test_seed_precedence(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("seed = 1\n")
    assert load_run_config(path, environ={}).seed == 1
    assert load_run_config(path, environ={"STT_SEED": "2"}).seed == 2
    assert load_run_config(path, {"seed": "3"}, environ={"STT_SEED": "2"}).seed == 3


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("learning_rate = 0.1\n")
    with pytest.raises(ValidationError, match="learning_rate"):
        read_config_file(path)
    with pytest.raises(ValidationError):
        build_run_config({"warp": "9"})


@pytest.mark.parametrize("values", [
    {"lr": "fast"},
    {"beta1": "1.0"},
    {"temperature": "0"},
    {"threshold": "1.5"},
    {"cosine": "maybe"},
    {"frame_position": "centre"},
])
def test_bad_values_are_validation_errors(values):
    with pytest.raises(ValidationError):
        build_run_config(values)


def test_unknown_preset_and_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        load_run_config(overrides={"preset": "cluster"}, environ={})
    with pytest.raises(ValidationError):
        load_run_config(tmp_path / "absent.conf", environ={})


def test_echo_and_data_paths(tmp_path):
    config = load_run_config(overrides={"out": str(tmp_path), "eval_manifest": "/data/eval.manifest"}, environ={})
    echo = config.echo()
    assert echo["seed"] == 7 and echo["out"] == str(tmp_path)
    assert config.data_path("eval_manifest", "eval.manifest").as_posix() == "/data/eval.manifest"
    assert config.data_path("touch_manifest", "touch.manifest") == tmp_path / "corpus" / "touch.manifest"


def test_hash_inside_a_value_is_not_a_comment(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("out = runs/#3  # third attempt\ntouch_manifest=data#2/touch.manifest\n")
    values = read_config_file(path)
    assert values == {"out": "runs/#3", "touch_manifest": "data#2/touch.manifest"}
    config = load_run_config(path, environ={})
    assert str(config.out_path) == "runs/#3"
