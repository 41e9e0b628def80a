#!/usr/bin/env python3
"""
Stdown Command Dispatcher
Single entry point for every stdown tool

Usage:
    python tools/stdown.py <subcommand> [flags...]

Subcommands:
    synth          generate a synthetic scene
    train          train the downscaling network
    infer          downscale a fine cube with a checkpoint
    eval-coarse    validate against a coarse reference
    eval-stations  validate against station series
    relgen         relative generalization error table
    tch            three-cornered-hat error variances
    gradcheck      autodiff gradient checks
    report         evaluation workbook

Exit Codes:
    0: Success
    1: Error occurred
    2: Usage error
"""

import sys
import importlib
from pathlib import Path
from typing import List, Optional

sys.path.insert(0, str(Path(__file__).parent.parent))
sys.path.insert(0, str(Path(__file__).parent))

SUBCOMMANDS = {
    "synth": "stdown_synth",
    "train": "stdown_train",
    "infer": "stdown_infer",
    "eval-coarse": "stdown_eval_coarse",
    "eval-stations": "stdown_eval_stations",
    "relgen": "stdown_relgen",
    "tch": "stdown_tch",
    "gradcheck": "stdown_gradcheck",
    "report": "stdown_report",
}


def usage() -> str:
    lines = ["usage: stdown.py <subcommand> [flags...]", "", "subcommands:"]
    lines += [f"  {name}" for name in SUBCOMMANDS]
    return "\n".join(lines)


def cli_dispatch(argv: List[str]) -> int:
    """Run one subcommand; returns its exit code."""
    if not argv or argv[0] in ("-h", "--help"):
        print(usage(), file=sys.stderr if not argv else sys.stdout)
        return 2 if not argv else 0
    name, rest = argv[0], list(argv[1:])
    if name not in SUBCOMMANDS:
        print(f"stdown.py: error: unknown subcommand '{name}'\n\n{usage()}", file=sys.stderr)
        return 2
    module = importlib.import_module(SUBCOMMANDS[name])
    try:
        return int(module.main(rest))
    except SystemExit as e:
        if e.code is None:
            return 0
        return e.code if isinstance(e.code, int) else 1


def main(argv: Optional[List[str]] = None) -> int:
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
