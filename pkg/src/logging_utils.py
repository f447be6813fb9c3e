"""
Logging setup and console summaries for simulator runs
"""

import logging
from typing import Any, Dict, Optional

import pandas as pd

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class SummaryPrinter:
    """Console output for CLI runs"""

    @staticmethod
    def print_summary(command: str, fields: Dict[str, Any]):
        """One line: command followed by key=value pairs"""
        parts = []
        for key, value in fields.items():
            if isinstance(value, float):
                parts.append(f"{key}={value:.6g}")
            else:
                parts.append(f"{key}={value}")
        print(f"{command}: " + " ".join(parts))

    @staticmethod
    def print_load_table(frame: pd.DataFrame, title: str = "NETWORK LOADS"):
        """Per-range load distributions"""
        print("=" * 70)
        print(title)
        print("=" * 70)
        if frame.empty:
            print("No connected radio range")
        else:
            print(frame.to_string(index=False, float_format=lambda v: f"{v:.1f}"))
        print("=" * 70)

    @staticmethod
    def print_retained_variance(summary: Dict[str, float], upper: Optional[Dict[str, float]] = None):
        """Fold-averaged retained variance per q"""
        print("\n" + "=" * 50)
        print("RETAINED VARIANCE (fold average)")
        print("=" * 50)
        for key, value in summary.items():
            line = f"{key:>6}: {value:.1%}"
            if upper and key in upper:
                line += f"  (upper bound {upper[key]:.1%})"
            print(line)
        print("=" * 50)


def setup_logging(log_level: str = "INFO", fmt: str = DEFAULT_FORMAT) -> logging.Logger:
    """Console logging for the whole package"""
    level = getattr(logging, str(log_level).upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"Unknown log level '{log_level}'")
    logging.basicConfig(level=level, format=fmt, handlers=[logging.StreamHandler()], force=True)
    return logging.getLogger("pcag")
