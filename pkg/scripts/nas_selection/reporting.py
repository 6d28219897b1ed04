"""Report generation: CSV tables, JSON summaries, run logs and Markdown reports."""

import json
import math
import sys
from collections.abc import Mapping, Sequence
from datetime import UTC, datetime
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd  # type: ignore[import-untyped]
import scipy  # type: ignore[import-untyped]

from .records import RunLog
from .selection import TRACE_COLUMNS, SelectionTrace

# Selection trace header (JSON) field order
TRACE_HEADER_FIELDS = ["method", "seed", "edge_order", "node_order", "genotype"]

# Verification results CSV column order
VERIFY_COLUMNS = ["check", "case", "value", "threshold", "passed", "detail"]


def tool_versions() -> dict[str, str]:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
    }


def write_table_csv(df: pd.DataFrame, columns: Sequence[str], output_path: Path) -> Path:
    """
    Write ``df`` with its columns in the documented order.

    Args:
        df: Table to write
        columns: Column order; missing columns are written empty
        output_path: Path to write CSV
    """
    df.reindex(columns=list(columns)).to_csv(output_path, index=False)
    return output_path


def write_runlog_jsonl(log: RunLog, output_path: Path) -> Path:
    return log.to_jsonl(output_path)


def write_trace(trace: SelectionTrace, genotype: str, csv_path: Path, json_path: Path) -> None:
    """
    Selection trace as one CSV row per decision plus a JSON header with the visiting order.

    Both files depend only on the selection inputs (no timestamps).
    """
    pd.DataFrame(trace.to_rows(), columns=TRACE_COLUMNS).to_csv(csv_path, index=False)
    header = {
        "method": trace.method,
        "seed": trace.seed,
        "edge_order": trace.edge_order,
        "node_order": trace.node_order,
        "genotype": genotype,
    }
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump({k: header[k] for k in TRACE_HEADER_FIELDS}, f, indent=2)
        f.write("\n")


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, np.floating | np.integer):
        return _jsonable(value.item())
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_jsonable(v) for v in value]
    return value


def write_summary_json(summary: Mapping[str, Any], output_path: Path) -> Path:
    """Summary JSON with creation time and tool versions appended."""
    output = dict(_jsonable(summary))
    output["created_timestamp"] = datetime.now(UTC).isoformat()
    output["tool_versions"] = tool_versions()
    with open(output_path, "w", encoding="utf-8") as f:
        json.dump(output, f, indent=2)
    return output_path


def _cell(value: Any) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def markdown_table(df: pd.DataFrame, max_rows: int = 50) -> list[str]:
    columns = list(df.columns)
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for row in df.head(max_rows).itertuples(index=False):
        lines.append("| " + " | ".join(_cell(v) for v in row) + " |")
    if len(df) > max_rows:
        lines.append("")
        lines.append(f"({len(df) - max_rows} more rows in the CSV)")
    return lines


def generate_report_md(
    title: str,
    overview: Mapping[str, Any],
    tables: Mapping[str, pd.DataFrame],
    output_path: Path,
    notes: Sequence[str] = (),
) -> Path:
    """
    Human-readable report: overview bullets, one section per table, optional notes.

    Args:
        title: Report heading
        overview: Key/value pairs listed under Overview
        tables: Section title -> table
        output_path: Path to write markdown
        notes: Free-form lines for a closing Notes section
    """
    lines = []

    lines.append(f"# {title}")
    lines.append("")

    lines.append("## 1. Overview")
    lines.append("")
    for key, value in overview.items():
        lines.append(f"- **{key}:** {_cell(value)}")
    lines.append(f"- **Created:** {datetime.now(UTC).strftime('%Y-%m-%d %H:%M:%S UTC')}")
    lines.append("")

    for number, (section, df) in enumerate(tables.items(), start=2):
        lines.append(f"## {number}. {section}")
        lines.append("")
        if df.empty:
            lines.append("(no rows)")
        else:
            lines.extend(markdown_table(df))
        lines.append("")

    if notes:
        lines.append("## Notes")
        lines.append("")
        for note in notes:
            lines.append(f"- {note}")
        lines.append("")

    with open(output_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
    return output_path
