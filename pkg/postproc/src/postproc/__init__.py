"""Plotting scripts for hdgflow run artifacts (CSV tables, VTU snapshots)."""

__version__ = "0.1.0"
