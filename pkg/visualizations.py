"""
Charts and raster visualizations.

Curves (loss, metric sweeps, CSF, CE analysis) are plotly figures written as
standalone HTML. Rasters (boundary overlays, BAL entropy heatmaps) are uint8
RGB arrays written as PNG.
"""
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
from plotly.colors import sample_colorscale
from PIL import Image
from skimage.segmentation import mark_boundaries

from spix_core import SuperpixelMap

logger = logging.getLogger(__name__)


def _empty_figure(message: str, title: str = "", size: int = 16) -> go.Figure:
    fig = go.Figure()
    fig.add_annotation(
        text=message,
        xref="paper", yref="paper",
        x=0.5, y=0.5, xanchor='center', yanchor='middle',
        showarrow=False, font=dict(size=size)
    )
    if title:
        fig.update_layout(title=title)
    return fig


class SpixCharts:
    """Plotly chart builders; each returns an annotated empty figure when it cannot draw"""

    @staticmethod
    def loss_curve(log: pd.DataFrame) -> go.Figure:
        """Training loss components per iteration"""
        try:
            if log.empty:
                return _empty_figure("No iterations logged", "Training loss")
            long = log.melt(id_vars="iteration", value_vars=["total", "ce_part", "pos_part"],
                            var_name="component", value_name="loss")
            fig = px.line(long, x="iteration", y="loss", color="component", title="Training loss")
            fig.update_layout(xaxis_title="Iteration", yaxis_title="Loss", height=400)
            return fig
        except Exception as e:
            logger.error(f"Error creating loss chart: {e}")
            return _empty_figure(f"Error creating chart: {str(e)}", size=14)

    @staticmethod
    def metric_sweep(summary: pd.DataFrame, method: str = "") -> go.Figure:
        """ASA, BR, BP and CO against superpixel count"""
        try:
            if summary.empty:
                return _empty_figure("No sweep results", "Metrics vs superpixel count")
            fig = go.Figure()
            for metric in ("asa", "br", "bp", "co"):
                fig.add_trace(go.Scatter(x=summary["superpixel_count"], y=summary[metric],
                                         mode="lines+markers", name=metric.upper()))
            title = "Metrics vs superpixel count" + (f" ({method})" if method else "")
            fig.update_layout(title=title, xaxis_title="Number of superpixels", yaxis_title="Score",
                              yaxis=dict(range=[0, 1.02]), height=400)
            return fig
        except Exception as e:
            logger.error(f"Error creating sweep chart: {e}")
            return _empty_figure(f"Error creating chart: {str(e)}", size=14)

    @staticmethod
    def csf_curve(table: pd.DataFrame, peak: Optional[float] = None) -> go.Figure:
        try:
            if table.empty:
                return _empty_figure("Empty CSF table", "Contrast sensitivity")
            fig = px.line(table, x="f", y="H", title="Contrast sensitivity")
            if peak is not None:
                fig.add_vline(x=peak, line_dash="dash", annotation_text=f"peak {peak:.2f} c/deg")
            fig.update_layout(xaxis_title="Spatial frequency (cycles/degree)", yaxis_title="H(f)", height=400)
            return fig
        except Exception as e:
            logger.error(f"Error creating CSF chart: {e}")
            return _empty_figure(f"Error creating chart: {str(e)}", size=14)

    @staticmethod
    def ce_distance(table: pd.DataFrame, fit: Optional[Dict[str, float]] = None) -> go.Figure:
        """Cross-entropy against sigma gap, one line per mean gap"""
        try:
            if table.empty:
                return _empty_figure("No CE analysis rows", "Cross-entropy vs label spread")
            fig = px.line(table, x="delta_sigma", y="ce", color=table["delta_mu"].astype(str),
                          markers=True, title="Cross-entropy vs label spread")
            if fit is not None:
                xs = np.array([table["delta_sigma"].min(), table["delta_sigma"].max()])
                fig.add_trace(go.Scatter(x=xs, y=fit["intercept"] + fit["slope"] * xs, mode="lines",
                                         line=dict(dash="dot"), name=f"fit R²={fit['r2']:.3f}"))
            fig.update_layout(xaxis_title="Δσ", yaxis_title="CE (nats)", legend_title="Δμ", height=400)
            return fig
        except Exception as e:
            logger.error(f"Error creating CE chart: {e}")
            return _empty_figure(f"Error creating chart: {str(e)}", size=14)


def save_figure(fig: go.Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs="cdn")
    return path


def boundary_overlay(image: np.ndarray, sp: SuperpixelMap, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Superpixel boundaries drawn over the image, uint8 RGB"""
    overlay = mark_boundaries(np.asarray(image, dtype=np.float64), sp.labels, color=color, mode="inner")
    return np.clip(np.round(overlay * 255.0), 0, 255).astype(np.uint8)


def heatmap(values: np.ndarray, colorscale: str = "Viridis") -> np.ndarray:
    """Map a 2-d array onto a plotly colorscale, uint8 RGB"""
    values = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(values)
    lo = values[finite].min() if finite.any() else 0.0
    hi = values[finite].max() if finite.any() else 1.0
    scaled = np.where(finite, (values - lo) / (hi - lo) if hi > lo else 0.0, 1.0)
    levels = np.linspace(0.0, 1.0, 256)
    palette = np.array([_parse_rgb(c) for c in sample_colorscale(colorscale, list(levels))], dtype=np.uint8)
    return palette[np.round(scaled * 255).astype(int)]


def _parse_rgb(text: str):
    if text.startswith("#"):
        return tuple(int(text[i:i + 2], 16) for i in (1, 3, 5))
    inner = text[text.index("(") + 1:text.index(")")]
    return tuple(int(round(float(v))) for v in inner.split(",")[:3])


def save_png(path, rgb: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)
    return path
