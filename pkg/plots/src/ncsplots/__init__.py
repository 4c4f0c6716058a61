"""Headless batch renderer for ncsim report CSVs."""

__version__ = "0.1.0"
