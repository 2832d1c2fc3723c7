"""Weakly-supervised category-specific surface mapping at desk scale."""

__version__ = "0.1.0"
