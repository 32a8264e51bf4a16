"""Desk-scale joint image + segmentation-mask diffusion toolkit."""

__version__ = "0.1.0"
