"""Shared runner for the sweep scripts: load a config, run one axis, print the table."""

import argparse
import sys
from pathlib import Path

from backdoor_forge.config import ConfigError, load_config
from backdoor_forge.pipeline import output_root, sweep

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main(axis: str, default_config: str) -> int:
    ap = argparse.ArgumentParser(description=f"{axis} sweep")
    ap.add_argument("--config", default=str(CONFIGS / default_config))
    ap.add_argument("--out")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        path = sweep(cfg, output_root(cfg, args.out), axis, args.workers)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    print(path.read_text(), end="")
    print(f"-> {path}")
    return 0
