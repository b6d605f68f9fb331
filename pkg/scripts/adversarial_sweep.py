#!/usr/bin/env python3
"""Sweep the feature-norm knob of the adversarial construction and print the
predicted vs observed attention-map Jacobian magnitude next to the softmax
mechanism's 1/4 ceiling.

Usage: python scripts/adversarial_sweep.py [--n N] [--d D]
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from attnlab.cli import main

if __name__ == "__main__":
    sys.exit(main(["adversarial", "--sweep", *sys.argv[1:]]))
