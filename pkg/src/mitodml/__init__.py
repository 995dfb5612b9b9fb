"""Mitosis detection with joint classification and deep metric learning."""

__version__ = "0.1.0"
