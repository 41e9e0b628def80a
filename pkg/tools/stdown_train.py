#!/usr/bin/env python3
"""
Stdown Train Tool
Train the downscaling network on a coarse cube and coarse target

Usage:
    python tools/stdown_train.py --data scene_dir --config cfg.json --out run1 --json

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

from core.geodata import load_cube, load_target
from core.stdown_core import (
    add_common_arguments, configure_logging, emit_error, emit_result,
    read_json, resolve_threads, write_run_manifest,
)
from core.trainer import RunConfig, build_dataset, fit

TRAIN_OVERRIDES = ("epochs", "seed", "dtype", "batch_size", "learning_rate")


def load_run_config(path: Optional[Path], overrides: Dict[str, Any], n_channels: int) -> RunConfig:
    """Flag > config file > dataclass default; in_channels follows the data when unset."""
    data: Dict[str, Any] = read_json(path) if path is not None else {}
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    data.setdefault("model", {}).setdefault("in_channels", n_channels + 3)
    train = data.setdefault("train", {})
    train.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(data)


def train(
    data_dir: Optional[Path],
    cube_dir: Optional[Path],
    target_dir: Optional[Path],
    config_path: Optional[Path],
    out: Path,
    resume: Optional[Path],
    overrides: Dict[str, Any],
    threads: int = 1
) -> Dict[str, Any]:
    if data_dir is None and (cube_dir is None or target_dir is None):
        raise ValueError("Pass --data, or both --cube and --target")
    cube = load_cube(cube_dir or data_dir / "coarse")
    target = load_target(target_dir or data_dir / "target")
    cfg = load_run_config(config_path, overrides, len(cube.schema))
    dataset = build_dataset(cube, target, cfg)
    ckpt = fit(dataset, cfg, out_dir=out, resume=resume, threads=threads)
    best = next((row for row in ckpt.history if row["epoch"] == ckpt.epoch), {})
    return {
        "status": "success",
        "checkpoint": str(out),
        "best_epoch": ckpt.epoch,
        "best_val_loss": best.get("val_loss"),
        "epochs_run": int(ckpt.history[-1]["epoch"]) if ckpt.history else 0,
        "stopped_early": ckpt.stopped_early,
        "split": dataset.split.counts(),
        "test_metrics": ckpt.test_metrics,
        "config_hash": ckpt.config_hash,
        "seed": cfg.train.seed,
        "threads": threads,
    }


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="Train the downscaling network",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train on a synthetic scene directory (uses coarse/ and target/)
  python tools/stdown_train.py --data scene --config configs/train_synthetic.json --out run1 --json

  # Explicit inputs, 64-bit verification mode
  python tools/stdown_train.py --cube scene/coarse --target scene/target --dtype float64 --out run64

  # Continue an interrupted run
  python tools/stdown_train.py --data scene --config cfg.json --out run1b --resume run1

  # Validation batches on four threads
  python tools/stdown_train.py --data scene --config cfg.json --out run1 --threads 4
        """
    )
    parser.add_argument('--data', type=Path, help='Scene directory with coarse/ and target/')
    parser.add_argument('--cube', type=Path, help='Coarse input cube (STC)')
    parser.add_argument('--target', type=Path, help='Coarse target field (STC)')
    parser.add_argument('--config', type=Path, help='config.json with model/loss/train sections')
    parser.add_argument('--out', required=True, type=Path, help='Checkpoint directory')
    parser.add_argument('--resume', type=Path, help='Checkpoint directory to resume from')
    parser.add_argument('--epochs', type=int, help='Override train.epochs')
    parser.add_argument('--seed', type=int, help='Override train.seed')
    parser.add_argument('--dtype', choices=['float32', 'float64'], help='Override train.dtype')
    parser.add_argument('--batch-size', type=int, help='Override train.batch_size')
    parser.add_argument('--learning-rate', type=float, help='Override train.learning_rate')
    add_common_arguments(parser, threads=True)
    args = parser.parse_args(argv)

    try:
        configure_logging(args.log_level)
        overrides = {k: getattr(args, k) for k in TRAIN_OVERRIDES}
        threads = resolve_threads(args.threads)
        result = train(args.data, args.cube, args.target, args.config, args.out,
                       args.resume, overrides, threads)
        write_run_manifest(args.out, "train", {
            "data": args.data, "cube": args.cube, "target": args.target,
            "config": args.config, "out": args.out, "resume": args.resume, **overrides,
            "threads": threads,
        }, seed=result["seed"], log_level=args.log_level)
        return emit_result(result, args.json, [
            f"✅ Checkpoint written to {args.out}",
            f"   Best epoch: {result['best_epoch']} (val {result['best_val_loss']})",
            f"   Split: {result['split']}",
        ])
    except Exception as e:
        return emit_error(e, args.json)


if __name__ == "__main__":
    sys.exit(main())
