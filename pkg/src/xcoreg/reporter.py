import datetime
import logging
import statistics
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.colors import HexColor
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from src.xcoreg.models import IterationTrace, ReportRow

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

REPORT_COLUMNS = ["case_id", "metric_name", "method", "transform_kind", "value"]
REPORT_KEY = ["case_id", "method", "metric_name"]


def trace_frame(trace: IterationTrace) -> pd.DataFrame:
    K = max((len(entry.pi) for entry in trace.entries), default=0)
    rows = []
    for entry in trace.entries:
        row: Dict[str, Any] = {
            "iter": entry.iteration,
            "metric": entry.metric,
            "loss": entry.loss,
            "grad_norm": entry.grad_norm,
        }
        for k in range(K):
            row[f"pi_{k}"] = entry.pi[k] if k < len(entry.pi) else float("nan")
        row["seconds"] = entry.seconds
        rows.append(row)
    columns = ["iter", "metric", "loss", "grad_norm"] + [f"pi_{k}" for k in range(K)] + ["seconds"]
    return pd.DataFrame(rows, columns=columns)


def write_trace(trace: IterationTrace, directory: PathLike) -> List[str]:
    """Trace as CSV (fixed columns) plus the full entries as JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / "trace.csv"
    trace_frame(trace).to_csv(csv_path, index=False)
    json_path = directory / "trace.json"
    json_path.write_text(trace.model_dump_json(indent=2), encoding="utf-8")
    return [str(csv_path), str(json_path)]


def read_report(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        return pd.DataFrame(columns=REPORT_COLUMNS)
    return pd.read_csv(path, float_precision="round_trip", dtype={"case_id": str, "method": str})


def upsert_report(path: PathLike, rows: Sequence[ReportRow]) -> pd.DataFrame:
    """Replace rows with the same (case_id, method, metric_name) and append the rest."""
    existing = read_report(path)
    incoming = pd.DataFrame([row.model_dump() for row in rows], columns=REPORT_COLUMNS)
    if not existing.empty:
        keys = set(map(tuple, incoming[REPORT_KEY].astype(str).values))
        stale = existing[REPORT_KEY].astype(str).apply(tuple, axis=1).isin(keys)
        existing = existing[~stale]
    frames = [f for f in (existing, incoming) if not f.empty]
    merged = pd.concat(frames, ignore_index=True) if frames else incoming
    merged = merged.sort_values(REPORT_KEY, kind="stable").reset_index(drop=True)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    merged.to_csv(path, index=False)
    logger.info(f"Report {path}: {len(incoming)} rows written, {len(merged)} total")
    return merged


def summarize(report: pd.DataFrame) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Per method and metric: mean, median, min, max and count over cases."""
    summary: Dict[str, Dict[str, Dict[str, float]]] = {}
    for (method, metric_name), group in report.groupby(["method", "metric_name"], sort=True):
        values = [float(v) for v in group["value"]]
        summary.setdefault(str(method), {})[str(metric_name)] = {
            "mean": statistics.mean(values),
            "median": statistics.median(values),
            "min": min(values),
            "max": max(values),
            "count": len(values),
        }
    return summary


def generate_pdf_report(report: pd.DataFrame, path: PathLike) -> str:
    doc = SimpleDocTemplate(str(path), pagesize=A4)
    styles = getSampleStyleSheet()
    story = []

    title_style = ParagraphStyle(
        "CustomTitle",
        parent=styles["Heading1"],
        fontSize=22,
        spaceAfter=24,
        textColor=HexColor("#2E86AB"),
        alignment=1,
    )
    heading_style = ParagraphStyle(
        "CustomHeading",
        parent=styles["Heading2"],
        fontSize=14,
        spaceAfter=10,
        spaceBefore=16,
        textColor=HexColor("#A23B72"),
    )
    table_style = TableStyle(
        [
            ("BACKGROUND", (0, 0), (-1, 0), HexColor("#F0F0F0")),
            ("TEXTCOLOR", (0, 0), (-1, -1), colors.black),
            ("ALIGN", (0, 0), (-1, -1), "LEFT"),
            ("FONTNAME", (0, 0), (-1, -1), "Helvetica"),
            ("FONTSIZE", (0, 0), (-1, -1), 9),
            ("BOTTOMPADDING", (0, 0), (-1, -1), 6),
            ("GRID", (0, 0), (-1, -1), 0.25, colors.grey),
        ]
    )

    story.append(Paragraph("Registration Evaluation Summary", title_style))
    story.append(Paragraph(f"Generated {datetime.datetime.now().strftime('%Y-%m-%d %H:%M')}", styles["Normal"]))
    story.append(Spacer(1, 12))

    cases = sorted(report["case_id"].astype(str).unique()) if not report.empty else []
    story.append(Paragraph(f"Cases evaluated: {len(cases)}", styles["Normal"]))

    for method, metrics in summarize(report).items():
        story.append(Paragraph(f"Method: {method}", heading_style))
        data = [["Metric", "Mean", "Median", "Min", "Max", "Cases"]]
        for metric_name, stats in metrics.items():
            data.append(
                [
                    metric_name,
                    f"{stats['mean']:.4f}",
                    f"{stats['median']:.4f}",
                    f"{stats['min']:.4f}",
                    f"{stats['max']:.4f}",
                    str(stats["count"]),
                ]
            )
        table = Table(data, colWidths=[1.3 * inch] + [0.9 * inch] * 5)
        table.setStyle(table_style)
        story.append(table)
        story.append(Spacer(1, 10))

    doc.build(story)
    return str(path)
