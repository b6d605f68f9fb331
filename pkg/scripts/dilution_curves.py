#!/usr/bin/env python3
"""Write locality curves (threshold,ratio CSV per mechanism) for seeded
random inputs, plus the pairwise signed concentration areas.

Usage: python scripts/dilution_curves.py [--out DIR] [--seed N]
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from attnlab.cli import main

if __name__ == "__main__":
    argv = sys.argv[1:]
    if not any(a.startswith("--out") for a in argv):
        argv += ["--out", "dilution_out"]
    sys.exit(main(["dilution", *argv]))
