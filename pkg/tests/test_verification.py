import json
from dataclasses import replace

import pandas as pd
import pytest

from scripts.nas_selection.reporting import (
    TRACE_HEADER_FIELDS,
    VERIFY_COLUMNS,
    generate_report_md,
    markdown_table,
    write_summary_json,
    write_table_csv,
    write_trace,
)
from scripts.nas_selection.selection import TRACE_COLUMNS, pt_select
from scripts.nas_selection.verification import (
    CheckResult,
    VerificationResult,
    determinism_check,
    gradcheck_sweep,
    mixing_oracle_sweep,
)


def test_mixing_oracle_sweep_passes():
    result = mixing_oracle_sweep(sets=5, step=0.001, seed=0)
    assert result.passed, result.failures
    checks = {c.check for c in result.checks}
    assert {"stationarity", "grid", "symmetric", "perfect-skip"} <= checks


def test_gradcheck_sweep_covers_every_variant():
    result = gradcheck_sweep(models=4, seed=0)
    assert result.passed, result.failures
    assert [c.case.split()[2] for c in result.checks] == ["(S2P,", "(S3P,", "(S4P,", "(FULL,"]


def test_determinism_check(single_node_spec, small_dataset, short_train, short_select):
    train = replace(short_train, epochs=1)
    select = replace(short_select, train=train)
    result = determinism_check(single_node_spec, small_dataset, train, select)
    assert [c.check for c in result.checks] == ["checkpoint", "genotype", "trace"]
    assert result.passed


def test_failures_are_reported():
    result = VerificationResult(
        "demo", [CheckResult("a", "x", 0.1, 0.2, True), CheckResult("b", "y", 0.3, 0.2, False)]
    )
    assert not result.passed
    assert [c.check for c in result.failures] == ["b"]
    assert list(result.checks[0].to_dict()) == VERIFY_COLUMNS


def test_table_csv_uses_documented_column_order(tmp_path):
    df = pd.DataFrame([{"b": 2, "a": 1}])
    path = write_table_csv(df, ["a", "b", "c"], tmp_path / "t.csv")
    assert path.read_text().splitlines() == ["a,b,c", "1,2,"]


def test_summary_json_replaces_non_finite_values(tmp_path):
    path = write_summary_json({"tau": float("nan"), "n": 3}, tmp_path / "s.json")
    data = json.loads(path.read_text())
    assert data["tau"] is None
    assert data["n"] == 3
    assert "numpy" in data["tool_versions"]


def test_trace_files(tmp_path, trained_supernet, small_dataset, short_select):
    _, trace = pt_select(trained_supernet, small_dataset, short_select)
    write_trace(trace, "g", tmp_path / "trace.csv", tmp_path / "trace.json")
    header = json.loads((tmp_path / "trace.json").read_text())
    assert list(header) == TRACE_HEADER_FIELDS
    assert header["edge_order"] == trace.edge_order
    table = pd.read_csv(tmp_path / "trace.csv")
    assert list(table.columns) == TRACE_COLUMNS
    assert len(table) == len(trace.decisions)


def test_markdown_report(tmp_path):
    df = pd.DataFrame({"edge": ["0->2", "1->2"], "tau": [0.5, float("nan")]})
    assert markdown_table(df)[2] == "| 0->2 | 0.5000 |"
    assert markdown_table(df, max_rows=1)[-1] == "(1 more rows in the CSV)"
    path = generate_report_md(
        "Demo", {"Edges": 2}, {"Taus": df, "Empty": df.iloc[0:0]}, tmp_path / "r.md", ["n"]
    )
    text = path.read_text()
    assert text.startswith("# Demo\n")
    assert "## 2. Taus" in text
    assert "| 1->2 | - |" in text
    assert "(no rows)" in text
    assert text.rstrip().endswith("- n")


@pytest.mark.slow
def test_full_gradcheck_sweep():
    assert gradcheck_sweep(models=100).passed
