"""Predicted perfusion maps from plain CT and CT angiography."""

__version__ = "0.1.0"
