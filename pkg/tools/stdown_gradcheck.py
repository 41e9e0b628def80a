#!/usr/bin/env python3
"""
Stdown Gradcheck Tool
Central-difference gradient checks of every differentiable operator

Usage:
    python tools/stdown_gradcheck.py --ops all --json

Exit Codes:
    0: Every checked operator is within tolerance
    1: An operator failed, or an error occurred
    2: Usage error
"""

import sys
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.diffcore import SUITE_TOLERANCE, operator_suite, suite_operator_names
from core.stdown_core import (
    add_common_arguments, configure_logging, emit_error, emit_result, write_json,
    write_run_manifest,
)
from core.trainer import model_gradient_check

MODEL_CHECK = "model_loss"


def gradcheck(ops: str, instances: int, seed: int, tolerance: float) -> Dict[str, Any]:
    requested = suite_operator_names() + [MODEL_CHECK] if ops == "all" else \
        [o.strip() for o in ops.split(",") if o.strip()]
    if not requested:
        raise ValueError("--ops must name at least one operator")
    operators = [o for o in requested if o != MODEL_CHECK]
    results = operator_suite(instances, seed, operators, tolerance) if operators else {}
    if MODEL_CHECK in requested:
        worst = model_gradient_check(instances=instances, seed=seed)
        results[MODEL_CHECK] = {"max_rel_error": worst, "tolerance": tolerance,
                                "passed": bool(worst < tolerance), "instances": instances}
    failed = sorted(name for name, r in results.items() if not r["passed"])
    return {
        "status": "success" if not failed else "failed",
        "checked": len(results),
        "failed": failed,
        "results": results,
    }


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Gradient checks of the autodiff operators",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
Examples:
  # Every operator plus the composed model loss
  python tools/stdown_gradcheck.py --ops all --json

  # A few operators, more instances
  python tools/stdown_gradcheck.py --ops conv2d,conv1d_time,gelu --instances 50

Operators: {', '.join(suite_operator_names())}, {MODEL_CHECK}
        """
    )
    parser.add_argument('--ops', default='all', help="Comma-separated operator names or 'all'")
    parser.add_argument('--instances', type=int, default=20, help='Random instances per operator')
    parser.add_argument('--seed', type=int, default=0, help='Random seed')
    parser.add_argument('--tolerance', type=float, default=SUITE_TOLERANCE,
                        help=f'Maximum relative error (default: {SUITE_TOLERANCE:g})')
    parser.add_argument('--out', type=Path, help='Directory for gradcheck.json and the run manifest')
    add_common_arguments(parser)
    args = parser.parse_args(argv)

    try:
        configure_logging(args.log_level)
        result = gradcheck(args.ops, args.instances, args.seed, args.tolerance)
        if args.out is not None:
            write_json(args.out / "gradcheck.json", result)
            write_run_manifest(args.out, "gradcheck", {
                "ops": args.ops, "instances": args.instances, "tolerance": args.tolerance,
            }, seed=args.seed, log_level=args.log_level)
        lines = [f"{'✅' if r['passed'] else '❌'} {name}: {r['max_rel_error']:.3e}"
                 for name, r in result["results"].items()]
        emit_result(result, args.json, lines)
        return 0 if not result["failed"] else 1
    except Exception as e:
        return emit_error(e, args.json)


if __name__ == "__main__":
    sys.exit(main())
