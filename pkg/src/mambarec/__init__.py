"""Bidirectional gated Mamba sequential recommender, CPU-only and self-contained."""

__version__ = "0.1.0"
