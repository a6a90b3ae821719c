"""Generative sound event detection on a self-contained float64 autodiff core."""

__version__ = "0.1.0"
