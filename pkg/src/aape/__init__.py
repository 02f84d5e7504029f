"""Aggregate-and-adapt prompt embeddings in frozen-encoder embedding space."""

__version__ = "0.1.0"
