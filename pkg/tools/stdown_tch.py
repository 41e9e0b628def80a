#!/usr/bin/env python3
"""
Stdown TCH Tool
Three-cornered-hat error variance maps for three or more co-located products

Usage:
    python tools/stdown_tch.py --products prod truth_noisy baseline --out tch --json

All products must share one grid; only timestamps common to every product
are used. Three products use the closed form, more use least squares.

Exit Codes:
    0: Success
    1: Error occurred
    2: Usage error
"""

import sys
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.evalkit import MIN_TCH_SAMPLES, daily_means, tch_maps, write_metrics_csv, write_summary_json
from core.geodata import TargetField, load_target, save_field_map
from core.stdown_core import (
    InsufficientDataError, ShapeMismatchError, add_common_arguments, configure_logging,
    emit_error, emit_result, write_pgm, write_run_manifest,
)

SAMPLINGS = ("3-hourly", "daily")


def align_products(products: Sequence[TargetField]) -> np.ndarray:
    """Timestamps present in every product."""
    grid = products[0].grid
    for p in products[1:]:
        if p.grid != grid:
            raise ShapeMismatchError("TCH products must share one grid",
                                     {"first": grid.to_dict(), "other": p.grid.to_dict()})
    times = products[0].times
    for p in products[1:]:
        times = np.intersect1d(times, p.times)
    if times.size == 0:
        raise InsufficientDataError("TCH products share no timestamps")
    return times


def stack(products: Sequence[TargetField], times: np.ndarray, sampling: str):
    values, masks = [], []
    for p in products:
        idx = np.searchsorted(p.times, times)
        v, m = p.values[idx], p.mask[idx]
        if sampling == "daily":
            v, m, _ = daily_means(v, m, times)
        values.append(v)
        masks.append(m)
    return np.stack(values), np.stack(masks)


def run_tch(paths: Sequence[Path], names: Sequence[str], out: Path, samplings: Sequence[str],
            min_samples: int) -> Dict[str, Any]:
    if len(paths) < 3:
        raise InsufficientDataError(f"TCH needs at least 3 products, got {len(paths)}")
    products = [load_target(p) for p in paths]
    times = align_products(products)
    grid = products[0].grid
    out.mkdir(parents=True, exist_ok=True)
    rows, summary = [], {"products": list(names), "shared_times": int(times.size), "maps": {}}
    for sampling in samplings:
        values, masks = stack(products, times, sampling)
        maps = tch_maps(values, masks, min_samples, sampling)
        tag = sampling.replace("-", "")
        summary["method"] = maps.method
        summary["maps"][sampling] = {"valid_cells": int(maps.valid.sum()),
                                     "flagged_cells": int((~maps.valid).sum())}
        for k, name in enumerate(names):
            var = maps.variances[k]
            ok = maps.valid
            save_field_map(out / f"tch_{name}_{tag}", grid, "error_variance", "(m3/m3)^2",
                           np.where(ok, var, 0.0), ok)
            write_pgm(out / f"tch_{name}_{tag}.pgm", var, ok)
            rows.append({
                "product": name, "sampling": sampling, "method": maps.method,
                "valid_cells": int(ok.sum()),
                "clamped_cells": int(maps.clamped[k].sum()),
                "mean_variance": float(np.mean(var[ok])) if ok.any() else None,
                "median_std": float(np.median(np.sqrt(var[ok]))) if ok.any() else None,
            })
    write_metrics_csv(out / "tch_summary.csv", rows)
    summary["rows"] = rows
    write_summary_json(out / "summary.json", summary)
    return {"status": "success", "out": str(out), **summary}


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Three-cornered-hat error variances of co-located products",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Three products at 3-hour and daily-mean sampling
  python tools/stdown_tch.py --products prod_a prod_b prod_c --out tch --json

  # Named products, daily means only
  python tools/stdown_tch.py --products a b c d --names net ref1 ref2 ref3 --sampling daily --out tch
        """
    )
    parser.add_argument('--products', required=True, nargs='+', type=Path,
                        help='Three or more product directories (STC, same grid)')
    parser.add_argument('--names', nargs='+', help='Product names (default: directory names)')
    parser.add_argument('--out', required=True, type=Path, help='Output directory')
    parser.add_argument('--sampling', choices=['3-hourly', 'daily', 'both'], default='both',
                        help='Sampling of the series (default: both)')
    parser.add_argument('--min-samples', type=int, default=MIN_TCH_SAMPLES,
                        help=f'Shared valid samples per cell (default: {MIN_TCH_SAMPLES})')
    add_common_arguments(parser)
    args = parser.parse_args(argv)

    try:
        configure_logging(args.log_level)
        names = args.names or [p.name for p in args.products]
        if len(names) != len(args.products) or len(set(names)) != len(names):
            raise ValueError("--names must give one distinct name per product")
        samplings = SAMPLINGS if args.sampling == "both" else (args.sampling,)
        result = run_tch(args.products, names, args.out, samplings, args.min_samples)
        write_run_manifest(args.out, "tch", {
            "products": [str(p) for p in args.products], "names": names, "out": args.out,
            "sampling": args.sampling, "min_samples": args.min_samples,
        }, log_level=args.log_level)
        return emit_result(result, args.json, [
            f"✅ TCH ({result['method']}) over {result['shared_times']} timestamps",
            *[f"   {r['product']} [{r['sampling']}]: mean variance {r['mean_variance']}"
              for r in result["rows"]],
        ])
    except Exception as e:
        return emit_error(e, args.json)


if __name__ == "__main__":
    sys.exit(main())
