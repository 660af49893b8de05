"""
PDF evaluation reports built with reportlab.
"""
import io
import logging
from datetime import datetime
from typing import Dict, Optional

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["asa", "br", "bp", "co"]

_TABLE_STYLE = TableStyle([
    ('BACKGROUND', (0, 0), (-1, 0), colors.grey),
    ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
    ('ALIGN', (0, 0), (-1, -1), 'CENTER'),
    ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
    ('BOTTOMPADDING', (0, 0), (-1, 0), 8),
    ('BACKGROUND', (0, 1), (-1, -1), colors.beige),
    ('GRID', (0, 0), (-1, -1), 1, colors.black)
])


def _summary_rows(report: pd.DataFrame):
    rows = [['Metric', 'Mean', 'Min', 'Max']]
    for metric in METRIC_COLUMNS:
        values = report[metric]
        rows.append([metric.upper(), f"{values.mean():.4f}", f"{values.min():.4f}", f"{values.max():.4f}"])
    rows.append(['Superpixels', f"{report['superpixel_count'].mean():.1f}",
                 str(int(report['superpixel_count'].min())), str(int(report['superpixel_count'].max()))])
    return rows


def _image_rows(report: pd.DataFrame):
    rows = [['Image', 'Count'] + [m.upper() for m in METRIC_COLUMNS]]
    for _, row in report.iterrows():
        rows.append([str(row['name']), str(int(row['superpixel_count']))] +
                    [f"{row[m]:.4f}" for m in METRIC_COLUMNS])
    return rows


def generate_pdf_report(report: pd.DataFrame, title: str = "Superpixel evaluation",
                        details: Optional[Dict[str, str]] = None) -> Optional[io.BytesIO]:
    """Render a metrics table (one row per image) as a PDF; None when rendering fails"""
    try:
        buffer = io.BytesIO()
        doc = SimpleDocTemplate(buffer, pagesize=A4)
        styles = getSampleStyleSheet()
        story = []

        title_style = ParagraphStyle(
            'ReportTitle',
            parent=styles['Heading1'],
            fontSize=18,
            alignment=1,
            textColor=colors.darkblue
        )
        story.append(Paragraph(title, title_style))
        story.append(Spacer(1, 12))
        story.append(Paragraph(f"<b>Generated:</b> {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}", styles['Normal']))
        for key, value in (details or {}).items():
            story.append(Paragraph(f"<b>{key}:</b> {value}", styles['Normal']))
        story.append(Spacer(1, 20))

        if report.empty:
            story.append(Paragraph("No images were evaluated.", styles['Normal']))
        else:
            tolerance = int(report['boundary_tolerance'].iloc[0])
            story.append(Paragraph(f"<b>Summary over {len(report)} images</b> (boundary tolerance {tolerance} px)",
                                   styles['Heading2']))
            story.append(Spacer(1, 12))
            summary = Table(_summary_rows(report), colWidths=[1.6 * inch] + [1.2 * inch] * 3)
            summary.setStyle(_TABLE_STYLE)
            story.append(summary)
            story.append(Spacer(1, 20))

            story.append(Paragraph("<b>Per-image results</b>", styles['Heading2']))
            story.append(Spacer(1, 12))
            per_image = Table(_image_rows(report), repeatRows=1)
            per_image.setStyle(_TABLE_STYLE)
            story.append(per_image)

        doc.build(story)
        buffer.seek(0)
        return buffer

    except Exception as e:
        logger.error(f"Error generating PDF report: {str(e)}")
        return None
