from pathlib import Path
from typing import Union

from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import A4, landscape
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import cm
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from .evaluation import EvalReport


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.3f}"


class ReportPdfGenerator:
    def __init__(self):
        self.styles = getSampleStyleSheet()
        self.styles.add(ParagraphStyle(
            name='ReportTitle',
            parent=self.styles['Heading1'],
            fontSize=18,
            textColor=colors.HexColor('#0F172A'),
            alignment=TA_CENTER,
            spaceAfter=6
        ))
        self.styles.add(ParagraphStyle(
            name='ReportSubtitle',
            parent=self.styles['Heading2'],
            fontSize=10,
            textColor=colors.HexColor('#64748B'),
            alignment=TA_CENTER,
            spaceAfter=12
        ))

    def generate_pdf(self, report: EvalReport, path: Union[str, Path]) -> Path:
        """One landscape page: per-stratum aggregates of every metric."""
        path = Path(path)
        doc = SimpleDocTemplate(
            str(path),
            pagesize=landscape(A4),
            rightMargin=0.8 * cm,
            leftMargin=0.8 * cm,
            topMargin=0.8 * cm,
            bottomMargin=0.8 * cm,
            invariant=1,
        )
        elements = []

        # 1. Header
        title = f"Change IoU: {report.split}"
        elements.append(Paragraph(title, self.styles['ReportTitle']))
        subtitle = f"{len(report.rows)} pairs"
        if report.label:
            subtitle = f"{report.label} | {subtitle}"
        elements.append(Paragraph(subtitle, self.styles['ReportSubtitle']))

        # 2. Aggregates table
        headers = ['Stratum', 'Metric', 'Count', 'Median', 'Q1', 'Q3', 'Mean', 'Min', 'Max']
        table_data = [headers]
        for agg in report.aggregates:
            table_data.append([
                agg.stratum, agg.metric, str(agg.count),
                _fmt(agg.median), _fmt(agg.q1), _fmt(agg.q3), _fmt(agg.mean), _fmt(agg.min), _fmt(agg.max),
            ])
        if len(table_data) == 1:
            table_data.append(['(no pairs)'] + [''] * (len(headers) - 1))

        t = Table(table_data, repeatRows=1)
        t.setStyle(TableStyle([
            # Header
            ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#059669')),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.HexColor('#FFFFFF')),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, -1), 7),
            ('ALIGN', (2, 0), (-1, -1), 'CENTER'),
            ('BOTTOMPADDING', (0, 0), (-1, -1), 2),
            ('TOPPADDING', (0, 0), (-1, -1), 2),
            # Zebra rows
            ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, colors.HexColor('#F8FAFC')]),
            ('GRID', (0, 0), (-1, -1), 0.25, colors.HexColor('#E2E8F0')),
        ]))
        elements.append(t)
        elements.append(Spacer(1, 0.3 * cm))

        doc.build(elements)
        return path
