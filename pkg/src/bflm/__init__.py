"""Backward/forward GRU language models for word-constrained generation."""

__version__ = "0.1.0"
