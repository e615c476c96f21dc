import json

import pandas as pd
import pytest

from src.xcoreg.models import IterationTrace, ReportRow, TraceEntry
from src.xcoreg.reporter import generate_pdf_report, read_report, summarize, trace_frame, upsert_report, write_trace


def _trace(n=3, K=2):
    trace = IterationTrace()
    for i in range(n):
        trace.append(
            TraceEntry(
                iteration=i,
                stage="xcoreg",
                level=0,
                metric=0.1 * i,
                loss=-0.1 * i,
                grad_norm=1.0 / (i + 1),
                pi=[1.0 / K] * K,
                seconds=0.01,
            )
        )
    return trace


def _rows(case_id="c1", method="xmetric", gwi=1.25):
    return [
        ReportRow(case_id=case_id, metric_name="gwi", method=method, transform_kind="ffd", value=gwi),
        ReportRow(case_id=case_id, metric_name="gre", method=method, transform_kind="ffd", value=2.5),
    ]


class TestTrace:
    def test_columns(self):
        frame = trace_frame(_trace(K=3))
        assert list(frame.columns) == ["iter", "metric", "loss", "grad_norm", "pi_0", "pi_1", "pi_2", "seconds"]
        assert len(frame) == 3

    def test_written_as_csv_and_json(self, tmp_path):
        csv_path, json_path = write_trace(_trace(), tmp_path / "run")
        frame = pd.read_csv(csv_path)
        assert frame["iter"].tolist() == [0, 1, 2]
        payload = json.loads(open(json_path, encoding="utf-8").read())
        assert len(payload["entries"]) == 3
        assert payload["entries"][0]["stage"] == "xcoreg"

    def test_empty_trace(self):
        assert list(trace_frame(IterationTrace()).columns) == ["iter", "metric", "loss", "grad_norm", "seconds"]


class TestReport:
    def test_upsert_is_idempotent(self, tmp_path):
        path = tmp_path / "report.csv"
        upsert_report(path, _rows())
        first = path.read_bytes()
        upsert_report(path, _rows())
        assert path.read_bytes() == first
        assert len(read_report(path)) == 2

    def test_upsert_replaces_matching_rows(self, tmp_path):
        path = tmp_path / "report.csv"
        upsert_report(path, _rows(gwi=1.25))
        upsert_report(path, _rows(method="initial", gwi=4.0))
        report = upsert_report(path, _rows(gwi=0.75))
        assert len(report) == 4
        value = report[(report.method == "xmetric") & (report.metric_name == "gwi")]["value"].item()
        assert value == pytest.approx(0.75)

    def test_values_survive_the_csv_exactly(self, tmp_path):
        path = tmp_path / "report.csv"
        upsert_report(path, _rows(gwi=0.1 + 0.2))
        report = read_report(path)
        assert report[report.metric_name == "gwi"]["value"].item() == 0.1 + 0.2

    def test_missing_report_is_empty(self, tmp_path):
        assert read_report(tmp_path / "none.csv").empty

    def test_summary(self, tmp_path):
        path = tmp_path / "report.csv"
        upsert_report(path, _rows("c1", gwi=1.0))
        report = upsert_report(path, _rows("c2", gwi=3.0))
        stats = summarize(report)["xmetric"]["gwi"]
        assert stats["mean"] == pytest.approx(2.0)
        assert stats["count"] == 2

    def test_pdf_summary(self, tmp_path):
        report = upsert_report(tmp_path / "report.csv", _rows())
        path = generate_pdf_report(report, tmp_path / "report.pdf")
        assert open(path, "rb").read(4) == b"%PDF"
