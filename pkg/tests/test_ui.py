import ast
import inspect
from pathlib import Path

import numpy as np
import pandas as pd
import streamlit as st

from ui.tabs import category_metrics_figure, epoch_loss_frame, loss_figure, robustness_figure, saliency_figure
from utils.training import LossRecord, loss_frame


def _losses():
    return loss_frame([LossRecord(0, 1, 0, 2.0), LossRecord(1, 1, 0, 1.0), LossRecord(2, 2, 1, 0.5)])


def test_loss_figure_has_one_trace_per_stage():
    fig = loss_figure(_losses())
    assert sorted(trace.name for trace in fig.data) == ["Stage 1", "Stage 2"]


def test_epoch_loss_frame_averages_steps():
    frame = epoch_loss_frame(_losses())
    assert list(frame["epoch"]) == [0, 1]
    assert list(frame["loss"]) == [1.5, 0.5]


def test_category_figure_skips_overall_row():
    report = pd.DataFrame({"category": ["brick", "grass", "overall"], "mAP": [90.0, 80.0, 85.0],
                           "mIoU": [70.0, 60.0, 65.0], "samples": [2, 2, 4]})
    fig = category_metrics_figure(report)
    assert [trace.name for trace in fig.data] == ["mAP", "mIoU"]
    assert list(fig.data[0].x) == ["brick", "grass"]


def test_robustness_figure_groups_metrics_by_frame():
    frame = pd.DataFrame({"frame": ["Start", "Middle", "End"], "mAP": [50.0, 90.0, 55.0],
                          "mIoU": [40.0, 80.0, 45.0], "samples": [3, 3, 3]})
    fig = robustness_figure(frame)
    assert sorted(trace.name for trace in fig.data) == ["mAP", "mIoU"]


def test_saliency_figure_is_a_unit_range_heatmap():
    fig = saliency_figure(np.eye(3))
    assert fig.data[0].type == "heatmap"
    assert (fig.data[0].zmin, fig.data[0].zmax) == (0, 1)


def _streamlit_calls(path, name):
    tree = ast.parse(Path(path).read_text(encoding="utf-8"))
    for node in ast.walk(tree):
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Attribute) and node.func.attr == name
                and isinstance(node.func.value, ast.Name) and node.func.value.id == "st"):
            yield node


def test_image_calls_use_keywords_the_installed_streamlit_accepts():
    accepted = set(inspect.signature(st.image).parameters)
    calls = list(_streamlit_calls(Path(__file__).parents[1] / "ui" / "tabs.py", "image"))
    assert calls
    for call in calls:
        keywords = {keyword.arg for keyword in call.keywords if keyword.arg}
        assert keywords <= accepted, keywords - accepted
