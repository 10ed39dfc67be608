"""Noise-tolerant hybrid prototypes for few-shot learning with noisy web features."""

__version__ = "0.1.0"
