"""Spatial-then-temporal self-supervised video correspondence at desk scale."""
__version__ = "0.1.0"
