"""Soft tokenization of CT volumes with text conditioning, plus training utilities."""

__version__ = "0.1.0"
