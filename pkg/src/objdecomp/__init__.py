"""Decomposed object reconstruction with compositional neural implicit fields."""

__version__ = "0.1.0"
