"""Semantic gaussian-splatting mapping and instance image-goal navigation."""

__version__ = "0.1.0"
