"""Deterministic parallel execution of unordered transaction blocks."""

__version__ = "0.1.0"
