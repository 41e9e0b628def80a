#!/usr/bin/env python3
"""
Stdown Eval Stations Tool
Validate a fine product against in-situ station series

Usage:
    python tools/stdown_eval_stations.py --product prod --stations scene/stations.csv --out eval --json

Writes metrics.csv (station and network rows), metrics_by_hour.csv (pooled
metrics at each 3-hour UTC timestamp), network_dynamics.csv and
summary.json including skipped stations with their reasons.

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

from core.evalkit import (
    metrics_by_hour, network_dynamics, validate_vs_stations, write_metrics_csv,
    write_summary_json,
)
from core.geodata import SeasonWindow, load_stations, load_target
from core.stdown_core import (
    add_common_arguments, configure_logging, emit_error, emit_result, write_run_manifest,
)


def eval_stations(
    product_dir: Path,
    stations_path: Path,
    out: Path,
    season: Optional[SeasonWindow],
    max_depth_cm: float,
    max_missing: float,
    coarse_dir: Optional[Path] = None
) -> Dict[str, Any]:
    product = load_target(product_dir)
    stations = load_stations(stations_path)
    result = validate_vs_stations(product, stations, season, max_depth_cm, max_missing)
    rows = list(result.stations)
    for name, rep in result.networks.items():
        rows.append({"scope": "network", "id": name, "network": name, "row": None, "col": None,
                     "n": rep.n, "r": rep.r, "bias": rep.bias, "rmse": rep.rmse,
                     "ubrmse": rep.ubrmse})
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", rows)
    by_hour = metrics_by_hour(result.pairs)
    by_hour.to_csv(out / "metrics_by_hour.csv", index=False, float_format="%.10g")
    coarse = load_target(coarse_dir) if coarse_dir is not None else None
    network_dynamics(product, result.pairs, coarse).to_csv(
        out / "network_dynamics.csv", index=False, float_format="%.10g")
    summary = {
        "stations_used": len(result.stations),
        "stations_skipped": len(result.skipped),
        "skipped": result.skipped,
        "networks": {k: v.to_dict() for k, v in result.networks.items()},
        "season": None if season is None else {"start": list(season.start), "end": list(season.end)},
    }
    write_summary_json(out / "summary.json", summary)
    return {"status": "success", "out": str(out), **summary}


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Validate a fine product against station series",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Melt-season validation (April 1 to November 1)
  python tools/stdown_eval_stations.py --product prod --stations scene/stations.csv --out eval --json

  # Whole record, with the coarse target added to the dynamics table
  python tools/stdown_eval_stations.py --product prod --stations scene/stations.csv \\
      --season all --coarse scene/target --out eval_all
        """
    )
    parser.add_argument('--product', required=True, type=Path, help='Fine product (STC)')
    parser.add_argument('--stations', required=True, type=Path, help='stations.csv')
    parser.add_argument('--out', required=True, type=Path, help='Output directory')
    parser.add_argument('--season', default='04-01:11-01',
                        help="Season window MM-DD:MM-DD, or 'all' (default: 04-01:11-01)")
    parser.add_argument('--max-depth', type=float, default=5.0,
                        help='Keep stations shallower than this depth in cm (default: 5)')
    parser.add_argument('--max-missing', type=float, default=0.95,
                        help='Maximum 3-hour missing rate (default: 0.95)')
    parser.add_argument('--coarse', type=Path, help='Coarse target (STC) for the dynamics table')
    add_common_arguments(parser)
    args = parser.parse_args(argv)

    try:
        configure_logging(args.log_level)
        season = SeasonWindow.parse(args.season)
        result = eval_stations(args.product, args.stations, args.out, season,
                               args.max_depth, args.max_missing, args.coarse)
        write_run_manifest(args.out, "eval-stations", {
            "product": args.product, "stations": args.stations, "out": args.out,
            "season": args.season, "max_depth": args.max_depth,
            "max_missing": args.max_missing, "coarse": args.coarse,
        }, log_level=args.log_level)
        pooled = result["networks"].get("all", {})
        return emit_result(result, args.json, [
            f"✅ Station validation: {result['stations_used']} used, "
            f"{result['stations_skipped']} skipped",
            f"   Pooled R={pooled.get('r')}  ubRMSE={pooled.get('ubrmse')}",
        ])
    except Exception as e:
        return emit_error(e, args.json)


if __name__ == "__main__":
    sys.exit(main())
