#!/usr/bin/env python3
"""Gradient-stability experiment: 500 SGD steps on the retrieval task,
median rsd of the gradient-norm stream per mechanism.

Usage: python scripts/run_stability.py [--seed N] [--steps N] [--lr F]
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from attnlab.cli import main

if __name__ == "__main__":
    sys.exit(main(["stability", *sys.argv[1:]]))
