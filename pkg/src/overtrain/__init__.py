"""Overtraining, margin growth and reversal in odor-discrimination models."""

__version__ = "0.1.0"
