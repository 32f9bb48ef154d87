"""Unsupervised multimodal machine translation with pseudo visual pivoting."""

__version__ = "0.1.0"
