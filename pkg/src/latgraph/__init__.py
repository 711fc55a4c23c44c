"""Latency graph modelling and reconstruction for vehicular networks."""

__version__ = "0.1.0"
