#!/usr/bin/env python3
"""
Run the accuracy and load studies
Convenience script: xval with every optional study, then loads
"""

import os
import sys

# Add the repository root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.main import cli_dispatch


def run_experiments(config_path: str = "config.yaml") -> int:
    print("Starting experiment suite")
    print(f"   Config: {config_path}")
    print("-" * 40)
    studies = [
        "--set", "experiments.masked_study=true",
        "--set", "experiments.accuracy_study=true",
        "--set", "experiments.k_sweep=true",
    ]
    code = cli_dispatch(["xval", "--config", config_path] + studies)
    if code != 0:
        print(f"Cross validation failed (exit {code})")
        return code
    return cli_dispatch(["loads", "--config", config_path])


if __name__ == "__main__":
    sys.exit(run_experiments(sys.argv[1] if len(sys.argv) > 1 else "config.yaml"))
