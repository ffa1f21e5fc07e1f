"""Masked-restoration transformer autoencoder for continuous expression profiles."""

__version__ = "0.1.0"
