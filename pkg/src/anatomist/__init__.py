"""Anatomy-prompted multimodal impression generation, desk scale."""

__version__ = "0.1.0"
