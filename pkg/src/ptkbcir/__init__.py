"""Toolkit for PTKB-aware conversational query reformulation and retrieval experiments."""

__version__ = "0.1.0"
