"""Desk-scale class-incremental learning engine with activation sparsification."""

__version__ = "0.1.0"
