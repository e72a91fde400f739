"""Churn definition calibration, player profiling and survival-ensemble churn prediction."""

from __future__ import annotations

__version__ = "0.1.0"
