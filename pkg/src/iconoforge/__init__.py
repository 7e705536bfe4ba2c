"""Iconography-classification toolkit: corpus curation, fine-tuning, CAMs and review."""

__version__ = "0.1.0"
