import pytest

from cli import main, parse_overrides, UsageError
from utils.corpus import parse_manifest, parse_record_line


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("STT_SEED", raising=False)


def _flags(out_dir):
    return ["--out", str(out_dir), "--seed", "3", "--image-side", "8", "--patch-size", "2",
            "--backbone-dim", "8", "--shared-dim", "4", "--stage1-epochs", "2", "--stage2-epochs", "1",
            "--frozen-epochs", "1", "--batch-size", "4", "--steps-per-epoch", "2"]


SYNTH = ["synth", "--categories", "3", "--instances", "2", "--test-instances", "1", "--frames", "3",
         "--web-images", "2", "--eval-scenes", "3", "--interactive-scenes", "2"]


@pytest.fixture
def trained(tmp_path):
    assert main(SYNTH + _flags(tmp_path)) == 0
    assert main(["train"] + _flags(tmp_path)) == 0
    return tmp_path


def test_unknown_flag_exits_with_usage(capsys):
    assert main(["train", "--bogus", "1"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_missing_command():
    assert main(["fly"]) == 1
    assert main([]) == 1


def test_overrides_accept_both_spellings():
    assert parse_overrides(["--stage1-epochs", "3", "--lr=0.1"]) == {"stage1_epochs": "3", "lr": "0.1"}
    with pytest.raises(UsageError):
        parse_overrides(["--lr"])
    with pytest.raises(UsageError):
        parse_overrides(["stray"])


def test_queries(capsys):
    assert main(["queries", "--category", "brick", "--objects", "house", "--places", "suburban neighborhood"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["brick house in a suburban neighborhood", "A close-up shot of brick house"]


def test_seed_flag_beats_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("STT_SEED", "5")
    assert main(SYNTH + _flags(tmp_path)[:2] + ["--image-side", "8", "--patch-size", "2",
                                                "--backbone-dim", "8", "--seed", "6"]) == 0
    assert parse_record_line(capsys.readouterr().out.strip())["seed"] == "6"


def test_validation_and_runtime_exit_codes(tmp_path):
    assert main(["eval", "--baseline", "square", "--threshold", "2", "--out", str(tmp_path)]) == 1
    assert main(["eval", "--baseline", "square", "--out", str(tmp_path / "empty")]) == 2


def test_synth_train_eval_produces_reports(trained, capsys):
    assert (trained / "loss.log").exists()
    assert (trained / "ckpt-2.bin").exists()
    assert main(["eval"] + _flags(trained)) == 0
    lines = (trained / "report-eval.txt").read_text().splitlines()
    header = parse_record_line(lines[0])
    assert header["seed"] == "3" and header["threshold"] == "0.5"
    assert parse_record_line(lines[1])["scope"] == "overall"
    assert "overall" in capsys.readouterr().out


def test_baseline_interactive_and_robustness_reports(trained):
    assert main(["eval", "--baseline", "circle"] + _flags(trained)) == 0
    assert (trained / "report-baseline-circle.txt").exists()
    assert main(["eval-interactive"] + _flags(trained)) == 0
    overall = parse_record_line((trained / "report-interactive.txt").read_text().splitlines()[1])
    assert overall["samples"] == "2"
    assert main(["robustness"] + _flags(trained)) == 0
    frames = [parse_record_line(line).get("frame") for line in (trained / "report-robustness.txt").read_text().splitlines()]
    assert [f for f in frames if f] == ["Start", "Middle", "End"]


def test_prototypes_pairs_and_localize(trained, capsys):
    assert main(["prototypes"] + _flags(trained)) == 0
    assert len((trained / "prototypes.txt").read_text().splitlines()) == 1 + 3 * 4
    assert main(["pairs", "--count", "5"] + _flags(trained)) == 0
    assert len((trained / "pairs.txt").read_text().splitlines()) == 5
    corpus = trained / "corpus"
    assert main(["localize", "--image", str(corpus / "features" / "scene-000.vtft"), "--category", "material00",
                 "--raster", str(corpus / "rasters" / "scene-000.ppm")] + _flags(trained)) == 0
    assert (trained / "heatmap.pgm").exists() and (trained / "heatmap-overlay.ppm").exists()
    tactile = next((corpus / "features").glob("train-vid000-f0001-touch.vtft"))
    assert main(["localize", "--image", str(corpus / "features" / "scene-001.vtft"), "--tactile", str(tactile),
                 "--name", "touch"] + _flags(trained)) == 0
    assert (trained / "touch.pgm").exists()
    assert main(["localize", "--image", str(corpus / "features" / "scene-001.vtft")] + _flags(trained)) == 1


def test_resume_from_checkpoint(trained):
    assert main(["train", "--resume", str(trained / "ckpt-1.bin")] + _flags(trained)) == 0
    lines = [line for line in (trained / "loss.log").read_text().splitlines() if not line.startswith("#")]
    assert len(lines) == 6


def test_instances_and_split(tmp_path, capsys):
    assert main(SYNTH + _flags(tmp_path)) == 0
    assert main(["extract-instances", "--exclude", "material02"] + _flags(tmp_path)) == 0
    lines = (tmp_path / "instances.txt").read_text().splitlines()
    assert len(lines) == 6 and not any("material02" in line for line in lines)
    assert main(["split", "--test-fraction", "0.3"] + _flags(tmp_path)) == 0
    records = parse_manifest(tmp_path / "split.manifest")
    train_videos = {r.video_id for r in records if r.split == "train"}
    test_videos = {r.video_id for r in records if r.split == "test"}
    assert test_videos and train_videos.isdisjoint(test_videos)


def test_dedup_lists_duplicates(tmp_path, capsys):
    for name, content in (("a", b"1"), ("b", b"1"), ("c", b"2")):
        (tmp_path / name).write_bytes(content)
    assert main(["dedup", str(tmp_path / "a"), str(tmp_path / "b"), str(tmp_path / "c")]) == 0
    out = [parse_record_line(line) for line in capsys.readouterr().out.splitlines()]
    assert out[-1] == {"dropped": str(tmp_path / "b"), "duplicate_of": str(tmp_path / "a")}


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    summary = parse_record_line(capsys.readouterr().out.splitlines()[-1])
    assert summary["passed"] == "True"
    assert float(summary["max_relative_error"]) <= 1e-4
