import math

import numpy as np
import pytest

from utils.alignment import LossConfig, TactileDescriptor
from utils.corpus import MaskImage, TouchInstance
from utils.encoders import Raster
from utils.errors import ValidationError
from utils.evaluation import (
    BaselineModel,
    EvalConfig,
    InteractiveSample,
    LocalizationSample,
    SaliencyMap,
    baseline_mask,
    binarize,
    compute_saliency,
    evaluate_interactive,
    evaluate_localization,
    export_heatmap,
    pixel_average_precision,
    region_iou,
    robustness_frame,
    robustness_report,
    upsample_bilinear,
)
from utils.file_handlers import read_netpbm

CFG = EvalConfig()


def planted(visual, descriptor, width, height):
    """Model whose saliency is stored on the sample itself."""
    return visual[descriptor] if isinstance(visual, dict) else visual


def _mask(rows):
    return MaskImage(np.array(rows, dtype=bool))


# ── Saliency ───────────────────────────────────────────────────────────────────

def test_align_corners_upsampling_thirds():
    out = upsample_bilinear([[0.0, 1.0], [0.0, 1.0]], 2, 4)
    np.testing.assert_allclose(out, [[0, 1 / 3, 2 / 3, 1]] * 2, atol=1e-15)


def test_upsampling_matches_bilinear_formula(rng):
    grid = rng.standard_normal((3, 3))
    out = upsample_bilinear(grid, 9, 9)
    for y in range(9):
        for x in range(9):
            py, px = y * 2 / 8, x * 2 / 8
            y0, x0 = min(int(py), 1), min(int(px), 1)
            dy, dx = py - y0, px - x0
            expected = (grid[y0, x0] * (1 - dy) * (1 - dx) + grid[y0, x0 + 1] * (1 - dy) * dx
                        + grid[y0 + 1, x0] * dy * (1 - dx) + grid[y0 + 1, x0 + 1] * dy * dx)
            assert out[y, x] == pytest.approx(expected, abs=1e-12)


def test_constant_similarity_gives_zero_saliency():
    f_v = np.broadcast_to(np.array([1.0, 2.0])[:, None, None], (2, 3, 3)).copy()
    saliency = compute_saliency(f_v, np.array([0.5, -1.0]), LossConfig(), 6, 6)
    np.testing.assert_array_equal(saliency.scores, np.zeros((6, 6)))


def test_saliency_is_invariant_to_descriptor_scale(rng):
    f_v = rng.standard_normal((4, 3, 3))
    desc = rng.standard_normal(4)
    raw = LossConfig(cosine=False)
    first = compute_saliency(f_v, desc, raw, 12, 12).scores
    second = compute_saliency(f_v, desc * 2.5, raw, 12, 12).scores
    np.testing.assert_allclose(first, second, atol=1e-12)
    assert first.min() == 0.0 and first.max() == pytest.approx(1.0)


def test_saliency_carries_descriptor_provenance(rng):
    desc = TactileDescriptor(rng.standard_normal(2), "prototype")
    assert compute_saliency(rng.standard_normal((2, 2, 2)), desc, LossConfig(), 4, 4).provenance == "prototype"


def test_saliency_rejects_dimension_mismatch(rng):
    with pytest.raises(ValidationError):
        compute_saliency(rng.standard_normal((3, 2, 2)), np.ones(2), LossConfig(), 4, 4)


def test_binarize_includes_threshold():
    mask = binarize(SaliencyMap([[0.5, 0.49], [1.0, 0.0]]), 0.5)
    np.testing.assert_array_equal(mask.pixels, [[True, False], [True, False]])


# ── Metrics ────────────────────────────────────────────────────────────────────

def test_iou_basic_cases():
    a = _mask([[1, 1], [0, 0]])
    assert region_iou(a, a) == 1.0
    assert region_iou(a, _mask([[0, 0], [1, 1]])) == 0.0
    assert region_iou(_mask([[0, 0]]), _mask([[0, 0]])) == 1.0


def test_iou_pixel_count_example():
    pred = np.zeros((4, 4), dtype=bool)
    pred[:2] = True
    gt = np.zeros((4, 4), dtype=bool)
    gt[1:3, :2] = True
    assert region_iou(MaskImage(pred), MaskImage(gt)) == pytest.approx(0.2)
    assert region_iou(MaskImage(gt), MaskImage(pred)) == pytest.approx(0.2)


def test_iou_rejects_size_mismatch():
    with pytest.raises(ValidationError):
        region_iou(_mask([[1, 0]]), _mask([[1], [0]]))


def test_average_precision_hand_example():
    ap = pixel_average_precision(SaliencyMap([[0.9, 0.8, 0.7, 0.6]]), _mask([[1, 0, 1, 0]]))
    assert ap == pytest.approx(5 / 6, abs=1e-15)


def test_average_precision_perfect_and_full_ground_truth(rng):
    scores = rng.uniform(0, 1, (4, 4))
    assert pixel_average_precision(SaliencyMap(scores), MaskImage(np.ones((4, 4)))) == 1.0
    assert pixel_average_precision(SaliencyMap(scores), MaskImage(scores >= np.median(scores))) == 1.0


def test_average_precision_ties_break_in_row_major_order():
    assert pixel_average_precision(SaliencyMap([[0.5, 0.5]]), _mask([[0, 1]])) == 0.5
    assert pixel_average_precision(SaliencyMap([[0.5, 0.5]]), _mask([[1, 0]])) == 1.0


def test_average_precision_is_invariant_to_monotone_transform(rng):
    scores = rng.uniform(0, 1, (4, 4))
    gt = MaskImage(rng.uniform(0, 1, (4, 4)) > 0.6)
    if gt.area == 0:
        gt = _mask([[1] + [0] * 3] + [[0] * 4] * 3)
    assert pixel_average_precision(SaliencyMap(scores), gt) == pixel_average_precision(SaliencyMap(scores ** 2), gt)


def test_average_precision_rejects_empty_ground_truth():
    with pytest.raises(ValidationError):
        pixel_average_precision(SaliencyMap([[0.3, 0.1]]), _mask([[0, 0]]))


# ── Baselines ──────────────────────────────────────────────────────────────────

def test_square_baseline_covers_every_pixel():
    assert baseline_mask("square", 224, 224).area == 50176


def test_circle_baseline_area_is_close_to_analytic():
    area = baseline_mask("circle", 224, 224).area
    assert abs(area - math.pi * 112 ** 2) / (math.pi * 112 ** 2) < 0.005


def test_baseline_rejects_unknown_kind_and_bad_size():
    with pytest.raises(ValidationError):
        baseline_mask("triangle", 4, 4)
    with pytest.raises(ValidationError):
        baseline_mask("square", 0, 4)


def test_square_baseline_miou_is_mean_coverage(rng):
    samples = []
    for index in range(6):
        pixels = rng.uniform(0, 1, (4, 5)) > 0.5
        pixels[0, 0] = True
        samples.append(LocalizationSample(f"s{index}", "brick", None, None, MaskImage(pixels)))
    report = evaluate_localization(samples, BaselineModel("square"), CFG)
    expected = 100 * np.mean([s.mask.area / 20 for s in samples])
    assert report.mean_iou == pytest.approx(expected, abs=1e-9)


# ── Localization reports ───────────────────────────────────────────────────────

def test_oracle_model_scores_one_hundred():
    mask = _mask([[1, 1, 0], [0, 1, 0]])
    samples = [LocalizationSample("a", "brick", mask.pixels.astype(float), None, mask)]
    report = evaluate_localization(samples, planted, CFG)
    assert (report.mean_ap, report.mean_iou, report.samples) == (100.0, 100.0, 1)


def test_zero_saliency_predicts_nothing():
    mask = _mask([[1, 0], [0, 0]])
    report = evaluate_localization([LocalizationSample("a", "brick", np.zeros((2, 2)), None, mask)], planted, CFG)
    assert report.mean_iou == 0.0


def test_report_composes_per_sample_metrics(rng):
    samples, aps, ious = [], [], []
    for index in range(5):
        scores = rng.uniform(0, 1, (4, 4))
        gt = MaskImage(rng.uniform(0, 1, (4, 4)) > 0.5)
        if gt.area == 0:
            gt = MaskImage(np.eye(4))
        samples.append(LocalizationSample(f"s{index}", "brick" if index % 2 else "grass", scores, None, gt))
        aps.append(pixel_average_precision(SaliencyMap(scores), gt))
        ious.append(region_iou(MaskImage(scores >= 0.5), gt))
    report = evaluate_localization(samples, planted, CFG)
    assert report.mean_ap == pytest.approx(100 * np.mean(aps), abs=1e-12)
    assert report.mean_iou == pytest.approx(100 * np.mean(ious), abs=1e-12)
    assert report.per_category["grass"].samples == 3
    assert report.per_category["brick"].mean_ap == pytest.approx(100 * np.mean(aps[1::2]), abs=1e-12)


def test_report_rejects_empty_inputs():
    with pytest.raises(ValidationError):
        evaluate_localization([], planted, CFG)
    sample = LocalizationSample("a", "brick", np.zeros((2, 2)), None, _mask([[0, 0], [0, 0]]))
    with pytest.raises(ValidationError):
        evaluate_localization([sample], planted, CFG)


def test_report_records_and_table(tmp_path):
    mask = _mask([[1, 0], [0, 0]])
    report = evaluate_localization([LocalizationSample("a", "brick", mask.pixels * 1.0, None, mask)],
                                   planted, CFG, {"seed": 7})
    path = tmp_path / "report.txt"
    report.write(path)
    lines = path.read_text().splitlines()
    assert "threshold=0.5" in lines[0] and "seed=7" in lines[0]
    assert lines[1].startswith("scope=overall\tmAP=100.000000")
    assert "brick" in report.to_table()
    assert list(report.to_frame()["category"]) == ["brick", "overall"]


# ── Interactive ────────────────────────────────────────────────────────────────

LEFT = np.array([[1, 1, 0, 0]] * 4, dtype=bool)
RIGHT = ~LEFT


def _interactive(sample_id, left_pred, right_pred):
    return InteractiveSample(sample_id, {"l": left_pred * 1.0, "r": right_pred * 1.0}, ("l", "r"),
                             (MaskImage(LEFT), MaskImage(RIGHT)), ("brick", "grass"))


def test_interactive_perfect_sample():
    assert evaluate_interactive([_interactive("a", LEFT, RIGHT)], planted, CFG) == 100.0


def test_interactive_requires_both_regions():
    weak = np.zeros((4, 4), dtype=bool)
    weak[:, :2] = True
    weak[:2, 2:] = True  # IoU 8/12 against LEFT
    low = np.zeros((4, 4), dtype=bool)
    low[:2, 2:] = True  # IoU 4/8 = 0.5 against RIGHT: not above 0.5
    assert evaluate_interactive([_interactive("a", weak, RIGHT)], planted, CFG) == 100.0
    assert evaluate_interactive([_interactive("a", LEFT, low)], planted, CFG) == 0.0


def test_interactive_counts_planted_successes():
    samples = [_interactive(f"s{i}", LEFT, RIGHT if i < 7 else LEFT) for i in range(10)]
    assert evaluate_interactive(samples, planted, CFG) == 70.0


def test_interactive_sample_needs_distinct_categories():
    with pytest.raises(ValidationError):
        InteractiveSample("a", None, ("l", "r"), (MaskImage(LEFT), MaskImage(RIGHT)), ("brick", "brick"))


# ── Robustness ─────────────────────────────────────────────────────────────────

def _feature_map():
    f_v = np.zeros((3, 2, 2))
    f_v[0, 0, :] = 1.0
    f_v[1, 1, :] = 1.0
    return f_v


def _saliency_model(visual, descriptor, width, height):
    return compute_saliency(visual, descriptor, LossConfig(), width, height)


TOP = np.array([[1] * 4, [1] * 4, [0] * 4, [0] * 4], dtype=bool)


def test_noisy_endpoints_lose_to_middle_frames():
    instance = TouchInstance("v:0-2", "v", "brick", 0, 2, ("v-0", "v-1", "v-2"))
    vectors = {"v-0": [0.0, 1.0, 0.0], "v-1": [1.0, 0.0, 0.0], "v-2": [0.0, 1.0, 0.0]}
    sample = LocalizationSample("scene", "brick", _feature_map(), None, MaskImage(TOP), instance.instance_id)
    reports = robustness_report([instance], _saliency_model, [sample], CFG, lambda s: np.array(vectors[s]))
    assert set(reports) == {"Start", "Middle", "End"}
    assert reports["Middle"].mean_iou == 100.0
    assert reports["Start"].mean_iou < reports["Middle"].mean_iou
    assert reports["End"].mean_iou < reports["Middle"].mean_iou
    frame = robustness_frame(reports)
    assert list(frame["frame"]) == ["Start", "Middle", "End"]


def test_single_frame_instances_give_identical_reports():
    instance = TouchInstance("v:4-4", "v", "brick", 4, 4, ("v-4",))
    sample = LocalizationSample("scene", "brick", _feature_map(), None, MaskImage(TOP), instance.instance_id)
    reports = robustness_report({instance.instance_id: instance}, _saliency_model, [sample], CFG,
                                lambda s: np.array([1.0, 0.2, 0.0]))
    start, middle, end = (reports[k] for k in ("Start", "Middle", "End"))
    assert (start.mean_ap, start.mean_iou) == (middle.mean_ap, middle.mean_iou) == (end.mean_ap, end.mean_iou)


def test_robustness_needs_linked_instances():
    sample = LocalizationSample("scene", "brick", _feature_map(), None, MaskImage(TOP), None)
    with pytest.raises(ValidationError):
        robustness_report([], _saliency_model, [sample], CFG, lambda s: np.ones(3))


# ── Heatmaps ───────────────────────────────────────────────────────────────────

def test_zero_saliency_heatmap_halves_the_image(tmp_path):
    image = Raster(np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10)
    gray, overlay = export_heatmap(SaliencyMap(np.zeros((2, 3))), image, tmp_path / "heat")
    assert (gray.name, overlay.name) == ("heat.pgm", "heat-overlay.ppm")
    np.testing.assert_array_equal(read_netpbm(gray), np.zeros((2, 3)))
    expected = np.floor(image.samples.astype(float) * 0.5 + 0.5)
    np.testing.assert_array_equal(read_netpbm(overlay), expected)


def test_unit_saliency_pixel_turns_red(tmp_path):
    image = Raster(np.full((2, 2, 3), 101, dtype=np.uint8))
    scores = np.zeros((2, 2))
    scores[1, 0] = 1.0
    _, overlay = export_heatmap(SaliencyMap(scores), image, tmp_path / "heat")
    pixels = read_netpbm(overlay)
    assert pixels[1, 0, 0] == math.floor(0.5 * 101 + 127.5 + 0.5)
    assert pixels[1, 0, 1] == math.floor(0.5 * 101 + 0.5)


def test_heatmap_bytes_are_deterministic(tmp_path, rng):
    image = Raster(rng.integers(0, 256, (3, 4, 3)))
    saliency = SaliencyMap(rng.uniform(0, 1, (3, 4)))
    first = export_heatmap(saliency, image, tmp_path / "a")
    second = export_heatmap(saliency, image, tmp_path / "b")
    for x, y in zip(first, second):
        assert x.read_bytes() == y.read_bytes()


def test_heatmap_rejects_size_mismatch(tmp_path):
    with pytest.raises(ValidationError):
        export_heatmap(SaliencyMap(np.zeros((2, 2))), Raster(np.zeros((3, 3, 3))), tmp_path / "h")
