"""Watermarking and black-box ownership verification for point-cloud datasets."""

__version__ = "0.1.0"
