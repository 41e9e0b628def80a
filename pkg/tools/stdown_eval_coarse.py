#!/usr/bin/env python3
"""
Stdown Eval Coarse Tool
Aggregate a fine product to the coarse grid and compare with a coarse reference

Usage:
    python tools/stdown_eval_coarse.py --product prod --truth scene/truth_coarse --out eval --json

Writes metrics.csv (pooled row plus one row per coarse pixel), the per-pixel
R map as an STC cube (r_map/) and graymap (r_map.pgm), and summary.json.

Exit Codes:
    0: Success
    1: Error occurred
    2: Usage error
"""

import sys
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.evalkit import validate_vs_coarse, write_metrics_csv, write_summary_json
from core.geodata import load_target, save_field_map
from core.stdown_core import (
    add_common_arguments, configure_logging, emit_error, emit_result,
    finite_or_none, write_pgm, write_run_manifest,
)


def eval_coarse(product_dir: Path, truth_dir: Path, out: Path) -> Dict[str, Any]:
    product = load_target(product_dir)
    truth = load_target(truth_dir)
    result = validate_vs_coarse(product, truth)
    report, maps = result.report, result.maps
    rows = [{"scope": "pooled", "row": None, "col": None, "n": report.n, "r": report.r,
             "bias": report.bias, "rmse": report.rmse, "ubrmse": report.ubrmse}]
    for i in range(result.grid.nlat):
        for j in range(result.grid.nlon):
            rows.append({"scope": "pixel", "row": i, "col": j, "n": int(maps["n"][i, j]),
                         **{k: finite_or_none(maps[k][i, j]) for k in ("r", "bias", "rmse", "ubrmse")}})
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows)
    r_valid = np.isfinite(maps["r"])
    save_field_map(out / "r_map", result.grid, "r", "1", np.where(r_valid, maps["r"], 0.0), r_valid)
    write_pgm(out / "r_map.pgm", maps["r"], r_valid, -1.0, 1.0)
    summary = {"pooled": report.to_dict(), "shared_times": int(result.times.size),
               "pixels_with_r": int(r_valid.sum()),
               "median_pixel_r": finite_or_none(np.median(maps["r"][r_valid])) if r_valid.any() else None}
    write_summary_json(out / "summary.json", summary)
    return {"status": "success", "out": str(out), **summary}


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Validate a fine product against a coarse reference",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Against the known coarse truth of a synthetic scene
  python tools/stdown_eval_coarse.py --product prod --truth scene/truth_coarse --out eval --json

  # Against the gappy coarse target itself
  python tools/stdown_eval_coarse.py --product prod --truth scene/target --out eval_target
        """
    )
    parser.add_argument('--product', required=True, type=Path, help='Fine product (STC)')
    parser.add_argument('--truth', required=True, type=Path, help='Coarse reference (STC)')
    parser.add_argument('--out', required=True, type=Path, help='Output directory')
    add_common_arguments(parser)
    args = parser.parse_args(argv)

    try:
        configure_logging(args.log_level)
        result = eval_coarse(args.product, args.truth, args.out)
        write_run_manifest(args.out, "eval-coarse", {
            "product": args.product, "truth": args.truth, "out": args.out,
        }, log_level=args.log_level)
        pooled = result["pooled"]
        return emit_result(result, args.json, [
            f"✅ Coarse validation over {result['shared_times']} timestamps",
            f"   R={pooled['r']}  bias={pooled['bias']}",
            f"   RMSE={pooled['rmse']}  ubRMSE={pooled['ubrmse']}",
        ])
    except Exception as e:
        return emit_error(e, args.json)


if __name__ == "__main__":
    sys.exit(main())
