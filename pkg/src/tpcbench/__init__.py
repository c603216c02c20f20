"""Desk-scale benchmarking suite for HTTPS third-party-copy transfers."""

__version__ = "0.1.0"
