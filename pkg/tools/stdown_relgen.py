#!/usr/bin/env python3
"""
Stdown Relgen Tool
Relative generalization error at the non-training timestamps

Usage:
    python tools/stdown_relgen.py --metrics eval/metrics_by_hour.csv --json

The baseline is the mean of the 06 and 18 UTC metrics. re_table.csv holds
one row per timestamp in {00, 03, 09, 12, 15, 21} UTC; positive values mean
better than baseline.

Exit Codes:
    0: Success
    1: Error occurred
    2: Usage error
"""

import sys
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.evalkit import read_metrics_table, relgen, write_re_table, write_summary_json
from core.stdown_core import (
    add_common_arguments, configure_logging, emit_error, emit_result, write_run_manifest,
)


def run_relgen(metrics_path: Path, out: Path) -> Dict[str, Any]:
    table = relgen(read_metrics_table(metrics_path))
    out.mkdir(parents=True, exist_ok=True)
    write_re_table(out / "re_table.csv", table)
    summary = table.to_dict()
    write_summary_json(out / "re_summary.json", summary)
    return {"status": "success", "re_table": str(out / "re_table.csv"), **summary}


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100 * value:+.2f}%"


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Relative generalization error from per-hour metrics",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Writes re_table.csv next to the metrics table
  python tools/stdown_relgen.py --metrics eval/metrics_by_hour.csv --json

  # Separate output directory
  python tools/stdown_relgen.py --metrics eval/metrics_by_hour.csv --out relgen
        """
    )
    parser.add_argument('--metrics', required=True, type=Path,
                        help='CSV with hour, r and ubrmse columns')
    parser.add_argument('--out', type=Path, help='Output directory (default: beside --metrics)')
    add_common_arguments(parser)
    args = parser.parse_args(argv)

    try:
        configure_logging(args.log_level)
        out = args.out or args.metrics.parent
        result = run_relgen(args.metrics, out)
        write_run_manifest(out, "relgen", {"metrics": args.metrics, "out": out},
                           log_level=args.log_level)
        return emit_result(result, args.json, [
            f"✅ RE table written to {result['re_table']}",
            f"   Mean RE_R: {_pct(result['mean_re_r'])}",
            f"   Mean RE_ubRMSE: {_pct(result['mean_re_ubrmse'])}",
        ])
    except Exception as e:
        return emit_error(e, args.json)


if __name__ == "__main__":
    sys.exit(main())
