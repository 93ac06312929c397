"""Gaussian-noise mean x variance sweep of the BadNets desk attack; writes sweep-noise_level.csv."""

import sys

from _sweep import main

if __name__ == "__main__":
    sys.exit(main("noise_level", "noise_grid.toml"))
