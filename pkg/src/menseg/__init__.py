"""Volumetric brain-tumor segmentation with a three-model majority-vote ensemble."""

__version__ = "0.1.0"
