import numpy as np
import pandas as pd
from PIL import Image

from spix_core import SuperpixelMap, init_grid
from visualizations import SpixCharts, _parse_rgb, boundary_overlay, heatmap, save_figure, save_png


def test_loss_curve_has_one_trace_per_component():
    log = pd.DataFrame({"iteration": [0, 1], "lr": [1e-4, 1e-4], "total": [2.0, 1.5],
                        "ce_part": [1.9, 1.4], "pos_part": [0.1, 0.1]})
    fig = SpixCharts.loss_curve(log)
    assert sorted(trace.name for trace in fig.data) == ["ce_part", "pos_part", "total"]


def test_empty_inputs_give_annotated_figures():
    for fig in (SpixCharts.loss_curve(pd.DataFrame()), SpixCharts.metric_sweep(pd.DataFrame()),
                SpixCharts.csf_curve(pd.DataFrame()), SpixCharts.ce_distance(pd.DataFrame())):
        assert not fig.data
        assert len(fig.layout.annotations) == 1


def test_broken_input_is_reported_not_raised():
    fig = SpixCharts.metric_sweep(pd.DataFrame({"S": [8]}))
    assert "Error creating chart" in fig.layout.annotations[0].text


def test_sweep_chart_and_html(tmp_path):
    summary = pd.DataFrame({"S": [16, 8], "superpixel_count": [4, 16], "asa": [0.8, 0.9],
                            "br": [0.5, 0.7], "bp": [0.4, 0.3], "co": [0.78, 0.78]})
    fig = SpixCharts.metric_sweep(summary, "grid")
    assert len(fig.data) == 4
    path = save_figure(fig, tmp_path / "charts" / "sweep.html")
    assert "plotly" in path.read_text()


def test_heatmap_is_rgb_uint8():
    values = np.linspace(0.0, 1.0, 12).reshape(3, 4)
    rgb = heatmap(values)
    assert rgb.shape == (3, 4, 3)
    assert rgb.dtype == np.uint8
    assert not np.array_equal(rgb[0, 0], rgb[-1, -1])
    assert heatmap(np.full((2, 2), 5.0)).shape == (2, 2, 3)


def test_parse_rgb_accepts_hex_and_functional_notation():
    assert _parse_rgb("#ff0080") == (255, 0, 128)
    assert _parse_rgb("rgb(12, 34.4, 56)") == (12, 34, 56)


def test_boundary_overlay_marks_cell_edges(tmp_path):
    image = np.full((32, 32, 3), 0.5)
    sp = SuperpixelMap(init_grid(32, 32, 16).owner_map(), 4)
    overlay = boundary_overlay(image, sp)
    assert overlay.dtype == np.uint8
    assert tuple(overlay[0, 15]) == (255, 0, 0)
    assert tuple(overlay[5, 5]) == (128, 128, 128)
    path = save_png(tmp_path / "overlay.png", overlay)
    np.testing.assert_array_equal(np.asarray(Image.open(path)), overlay)
