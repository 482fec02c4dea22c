"""Mesh segmentation, modal features and a two-level graph surrogate for mesh simulations."""

__version__ = "0.1.0"
