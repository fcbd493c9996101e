"""Adversarial perturbations in the YCbCr luma channel: analysis, attacks and a Y-only defense."""

__version__ = "0.1.0"
