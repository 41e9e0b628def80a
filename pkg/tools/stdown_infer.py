#!/usr/bin/env python3
"""
Stdown Infer Tool
Apply a trained checkpoint to a fine-resolution cube

Usage:
    python tools/stdown_infer.py --checkpoint run1 --fine scene/fine --out prod --json

The product is written to --out as a single-channel STC directory with the
fine cube's time axis; timestamps without a full input window stay masked.

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

from core.geodata import load_cube, save_target
from core.stdown_core import (
    add_common_arguments, configure_logging, emit_error, emit_result,
    resolve_threads, write_pgm, write_run_manifest,
)
from core.trainer import downscale, load_checkpoint


def infer(checkpoint: Path, fine: Path, out: Path, threads: int) -> Dict[str, Any]:
    ckpt = load_checkpoint(checkpoint)
    cube = load_cube(fine)
    product = downscale(ckpt, cube, threads=threads)
    save_target(product, out, dtype=ckpt.params_dtype)
    filled = np.flatnonzero(product.mask.any(axis=(1, 2)))
    if filled.size:
        k = int(filled[-1])
        write_pgm(out / "product_last.pgm", product.values[k], product.mask[k], 0.0, 0.6)
    return {
        "status": "success",
        "product": str(out),
        "shape": list(product.values.shape),
        "timestamps_filled": int(filled.size),
        "valid_fraction": float(product.mask.mean()) if product.mask.size else 0.0,
        "threads": threads,
    }


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Downscale a fine cube with a trained checkpoint",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Fine product from a trained run
  python tools/stdown_infer.py --checkpoint run1 --fine scene/fine --out prod --json

  # Single-thread run (bit-reproducible against itself)
  python tools/stdown_infer.py --checkpoint run1 --fine scene/fine --out prod --threads 1
        """
    )
    parser.add_argument('--checkpoint', required=True, type=Path, help='Checkpoint directory')
    parser.add_argument('--fine', required=True, type=Path, help='Fine input cube (STC)')
    parser.add_argument('--out', required=True, type=Path, help='Output product directory')
    add_common_arguments(parser, threads=True)
    args = parser.parse_args(argv)

    try:
        configure_logging(args.log_level)
        threads = resolve_threads(args.threads)
        result = infer(args.checkpoint, args.fine, args.out, threads)
        write_run_manifest(args.out, "infer", {
            "checkpoint": args.checkpoint, "fine": args.fine, "out": args.out, "threads": threads,
        }, log_level=args.log_level)
        return emit_result(result, args.json, [
            f"✅ Product written to {args.out}",
            f"   Shape: {result['shape']}",
            f"   Filled timestamps: {result['timestamps_filled']}",
        ])
    except Exception as e:
        return emit_error(e, args.json)


if __name__ == "__main__":
    sys.exit(main())
