"""Hypoglycemia detection from wearable skin-conductance signals."""

__version__ = "0.1.0"
