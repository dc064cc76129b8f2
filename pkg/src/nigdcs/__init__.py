"""Score-driven NIG models for daily Value-at-Risk with intraday aggregation."""

__version__ = "0.1.0"
