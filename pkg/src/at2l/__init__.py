"""Adversarial training with triplet loss (AT2L) on a small numpy engine."""

__version__ = "0.1.0"
