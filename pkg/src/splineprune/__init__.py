"""Spline-geometry tools for training, inspecting and pruning small CPA networks."""

__version__ = "0.1.0"
