# utils/pdf_generator.py
from reportlab.lib import colors
from reportlab.lib.pagesizes import landscape, letter
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

TABLE_STYLE = TableStyle([
    ('BACKGROUND', (0, 0), (-1, 0), colors.grey),
    ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
    ('ALIGN', (0, 0), (-1, -1), 'CENTER'),
    ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
    ('FONTSIZE', (0, 0), (-1, -1), 9),
    ('BOTTOMPADDING', (0, 0), (-1, 0), 8),
    ('BACKGROUND', (0, 1), (-1, -1), colors.beige),
    ('GRID', (0, 0), (-1, -1), 1, colors.black)
])


def _format(value):
    if isinstance(value, str):
        return value
    if isinstance(value, float):
        return '-' if value != value else f"{value:.4g}"
    return str(value)


def _frame_table(df):
    data = [[str(c) for c in df.columns]] + [[_format(v) for v in row] for row in df.itertuples(index=False)]
    table = Table(data)
    table.setStyle(TABLE_STYLE)
    return table


def _build(path, title, sections):
    doc = SimpleDocTemplate(path, pagesize=landscape(letter))
    styles = getSampleStyleSheet()
    elements = [Paragraph(title, styles['Title']), Spacer(1, 12)]
    for heading, df, note in sections:
        elements.append(Paragraph(heading, styles['Heading2']))
        elements.append(_frame_table(df))
        if note:
            elements.append(Spacer(1, 6))
            elements.append(Paragraph(note, styles['BodyText']))
        elements.append(Spacer(1, 12))
    doc.build(elements)
    return path


def generate_table1_pdf(path, table, preset):
    """Minimum of u per (scheme, dt, h) cell; 'x' marks a failed run."""
    note = "Failed runs (diverged, singular or non-convergent) are marked x."
    return _build(path, f"Minimum of u over the run, {preset}", [("Table of minima", table, note)])


def generate_eoc_pdf(path, eoc, fit, scheme_id, reference_note):
    sections = [
        (f"Errors and rates, scheme {scheme_id}", eoc, reference_note),
        ("Least-squares order over the ladder", fit, None),
    ]
    return _build(path, f"Convergence study, scheme {scheme_id}", sections)
