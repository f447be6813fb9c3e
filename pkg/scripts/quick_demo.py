#!/usr/bin/env python3
"""
Quick demo on synthetic data
Builds the tree, runs the distributed power iteration and a short
supervised-compression session
"""

import os
import sys

# Add the repository root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.main import cli_dispatch

if __name__ == "__main__":
    print("PCAg quick demo (synthetic data)")
    print("-" * 40)
    base = ["--config", "config.yaml", "--set", "data.trace=null", "--set", "synthetic.T=500"]
    for command in ("tree", "pim", "score"):
        code = cli_dispatch([command] + base)
        if code != 0:
            sys.exit(code)
