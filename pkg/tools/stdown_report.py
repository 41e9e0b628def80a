#!/usr/bin/env python3
"""
Stdown Report Tool
Collect the CSV tables of an evaluation directory into a styled workbook

Usage:
    python tools/stdown_report.py --eval-dir eval --output eval/report.xlsx --json

Exit Codes:
    0: Success
    1: Error occurred
    2: Usage error
"""

import sys
import argparse
from pathlib import Path
from typing import List, Optional

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.report_workbook import build_report
from core.stdown_core import (
    add_common_arguments, configure_logging, emit_error, emit_result, write_run_manifest,
)


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Build report.xlsx from evaluation tables",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Every CSV under eval/ (nested directories become name prefixes)
  python tools/stdown_report.py --eval-dir eval --json

  # Selected tables only
  python tools/stdown_report.py --eval-dir eval --tables metrics,re_table --output summary.xlsx
        """
    )
    parser.add_argument('--eval-dir', required=True, type=Path, help='Evaluation directory')
    parser.add_argument('--output', type=Path, help='Workbook path (default: EVAL_DIR/report.xlsx)')
    parser.add_argument('--tables', help='Comma-separated table names (default: all)')
    add_common_arguments(parser)
    args = parser.parse_args(argv)

    try:
        configure_logging(args.log_level)
        output = args.output or args.eval_dir / "report.xlsx"
        names = [t.strip() for t in args.tables.split(",")] if args.tables else None
        result = build_report(args.eval_dir, output, names)
        write_run_manifest(output.parent, "report", {
            "eval_dir": args.eval_dir, "output": output, "tables": args.tables,
        }, log_level=args.log_level)
        result = {"status": "success", **result}
        return emit_result(result, args.json, [
            f"✅ Report written to {result['output']}",
            *[f"   {name}: {rows} rows" for name, rows in result["sheets"].items()],
        ])
    except Exception as e:
        return emit_error(e, args.json)


if __name__ == "__main__":
    sys.exit(main())
