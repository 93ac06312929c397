"""Poison-ratio sweep of the BadNets desk attack; writes sweep-poison_ratio.csv."""

import sys

from _sweep import main

if __name__ == "__main__":
    sys.exit(main("poison_ratio", "ratio_sweep.toml"))
