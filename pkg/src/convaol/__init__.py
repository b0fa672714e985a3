"""Convolutional analysis operator learning with block proximal extrapolated
gradient methods, and its use as a regularizer in image reconstruction."""

__version__ = "0.1.0"
