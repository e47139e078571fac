"""Controllable image synthesis on a toy scale: patch codebook, multi-control token layout,
masked-sequence transformer, and progressive non-autoregressive decoding."""

__version__ = "0.1.0"
