"""Epoch sweep of the BadNets desk attack; writes sweep-epochs.csv."""

import sys

from _sweep import main

if __name__ == "__main__":
    sys.exit(main("epochs", "epoch_sweep.toml"))
