"""Desk-scale human-object interaction reconstruction toolkit."""

__version__ = "0.1.0"
