"""Gated convolutional classifier for paralinguistic cognitive-status screening from speech."""

__version__ = "0.1.0"
