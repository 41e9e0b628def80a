#!/usr/bin/env python3
"""
Evaluation workbook: every CSV table of an evaluation directory as one
styled sheet of report.xlsx.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from openpyxl import Workbook, load_workbook
from openpyxl.styles import Alignment, Font, NamedStyle, PatternFill
from openpyxl.utils import get_column_letter
from openpyxl.workbook.workbook import Workbook as OpenpyxlWorkbook
from openpyxl.worksheet.worksheet import Worksheet

from core.stdown_core import FormatError

logger = logging.getLogger(__name__)

COLOR_HEADER = "1F4E78"     # dark blue header fill
COLOR_HEADER_TEXT = "FFFFFF"
COLOR_ABSENT = "BFBFBF"     # grey text for absent metrics

FORMAT_METRIC = "0.0000"
FORMAT_PERCENT = "0.00%"
FORMAT_INTEGER = "0"
FORMAT_EPOCH = "0"

STYLE_HEADER = "StdownHeader"
STYLE_ABSENT = "StdownAbsent"

PERCENT_COLUMNS = {"re_r", "re_ubrmse", "mean_re_r", "mean_re_ubrmse"}
INTEGER_COLUMNS = {"n", "hour", "row", "col", "epoch", "stations", "n_patches", "samples"}

MAX_SHEET_NAME = 31
INVALID_SHEET_CHARS = (":", "\\", "/", "?", "*", "[", "]")


def sanitize_sheet_name(name: str) -> str:
    for char in INVALID_SHEET_CHARS:
        name = name.replace(char, "_")
    return name[:MAX_SHEET_NAME] or "Sheet1"


def create_report_styles(wb: OpenpyxlWorkbook) -> None:
    """Register the header and absent-value styles once per workbook."""
    if STYLE_HEADER not in wb.named_styles:
        header = NamedStyle(name=STYLE_HEADER)
        header.font = Font(color=COLOR_HEADER_TEXT, bold=True)
        header.fill = PatternFill(start_color=COLOR_HEADER, end_color=COLOR_HEADER, fill_type="solid")
        header.alignment = Alignment(horizontal="center")
        wb.add_named_style(header)
    if STYLE_ABSENT not in wb.named_styles:
        absent = NamedStyle(name=STYLE_ABSENT)
        absent.font = Font(color=COLOR_ABSENT, italic=True)
        absent.alignment = Alignment(horizontal="right")
        wb.add_named_style(absent)


def column_format(column: str) -> str:
    if column in PERCENT_COLUMNS:
        return FORMAT_PERCENT
    if column in INTEGER_COLUMNS:
        return FORMAT_INTEGER
    if column == "time_epoch":
        return FORMAT_EPOCH
    return FORMAT_METRIC


def _cell_value(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_frame(wb: OpenpyxlWorkbook, name: str, frame: pd.DataFrame) -> Worksheet:
    """Add a sheet holding a DataFrame; missing numbers show as 'n/a'."""
    ws = wb.create_sheet(sanitize_sheet_name(name))
    columns = [str(c) for c in frame.columns]
    for j, column in enumerate(columns, start=1):
        cell = ws.cell(row=1, column=j, value=column)
        cell.style = STYLE_HEADER
        width = max(len(column), 12)
        ws.column_dimensions[get_column_letter(j)].width = width + 2
    for i, row in enumerate(frame.itertuples(index=False), start=2):
        for j, (column, raw) in enumerate(zip(columns, row), start=1):
            value = _cell_value(raw)
            cell = ws.cell(row=i, column=j)
            if value is None and frame[column].dtype.kind == "f":
                cell.value = "n/a"
                cell.style = STYLE_ABSENT
                continue
            cell.value = value
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                cell.number_format = column_format(column)
    ws.freeze_panes = "A2"
    return ws


def collect_tables(eval_dir: Path, names: Optional[Sequence[str]] = None) -> Dict[str, pd.DataFrame]:
    """Read every *.csv under eval_dir (sorted by relative path)."""
    eval_dir = Path(eval_dir)
    if not eval_dir.is_dir():
        raise FileNotFoundError(f"Directory not found: {eval_dir}")
    tables: Dict[str, pd.DataFrame] = {}
    for path in sorted(eval_dir.rglob("*.csv")):
        key = path.relative_to(eval_dir).with_suffix("").as_posix().replace("/", "_")
        if names is not None and key not in names:
            continue
        try:
            tables[key] = pd.read_csv(path)
        except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
            raise FormatError(f"Cannot read table {path}: {e}", {"path": str(path)})
    return tables


def build_report(eval_dir: Path, output: Path, names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """Write report.xlsx with one sheet per table; returns sheet row counts."""
    tables = collect_tables(eval_dir, names)
    if not tables:
        raise FormatError(f"No CSV tables found under {eval_dir}")
    wb = Workbook()
    wb.remove(wb.active)
    create_report_styles(wb)
    sheets: Dict[str, int] = {}
    used: List[str] = []
    for key, frame in tables.items():
        name = sanitize_sheet_name(key)
        suffix = 1
        while name in used:
            suffix += 1
            name = sanitize_sheet_name(f"{key[:MAX_SHEET_NAME - 3]}_{suffix}")
        used.append(name)
        write_frame(wb, name, frame)
        sheets[name] = int(len(frame))
        logger.debug("Sheet %s: %d rows", name, len(frame))
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    wb.save(output)
    wb.close()
    return {"output": str(output), "sheets": sheets}


def read_report(path: Path) -> Dict[str, List[List[Any]]]:
    """Cell values per sheet, header row included."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    wb = load_workbook(path, read_only=True)
    try:
        return {name: [list(r) for r in wb[name].iter_rows(values_only=True)]
                for name in wb.sheetnames}
    finally:
        wb.close()


__all__ = [
    "sanitize_sheet_name", "create_report_styles", "column_format", "write_frame",
    "collect_tables", "build_report", "read_report",
]
