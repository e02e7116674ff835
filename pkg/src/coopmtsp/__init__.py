"""Cooperative two-arm rearrangement planning toolkit."""

__version__ = "0.1.0"
