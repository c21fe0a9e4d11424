"""Relational referring-expression generation and comprehension for object pairs in video."""

__version__ = "0.1.0"
