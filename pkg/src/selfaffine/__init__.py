"""Pseudo Hausdorff measure estimation for self-affine sets."""

__version__ = "0.1.0"
