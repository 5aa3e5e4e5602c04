"""Hyperspectral superpixel clustering: spectral-spatial graph convolution,
adaptive edge learning and a contrastive clustering trainer."""

__version__ = "0.1.0"
