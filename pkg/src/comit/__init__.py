"""Iterative crop-by-crop discrete image tokenization with a flow-matching decoder."""

__version__ = "0.1.0"
