"""Omnidirectional EPI transformer for 4D light-field super-resolution, in numpy."""

__version__ = "0.1.0"
