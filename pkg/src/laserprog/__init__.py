"""Condition-aware anomaly detection for laser power degradation traces."""

__version__ = "0.1.0"
