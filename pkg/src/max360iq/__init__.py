"""Blind omnidirectional image quality assessment with multi-axis attention."""

__version__ = "0.1.0"
