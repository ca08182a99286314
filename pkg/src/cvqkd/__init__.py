"""Continuous-variable QKD key-rate engine and protocol simulator."""

__version__ = "0.1.0"
