"""Batch transformer encoding into EMB1 vector files."""

__version__ = "0.1.0"
