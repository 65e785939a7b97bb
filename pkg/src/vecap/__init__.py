"""Recaptioning pipeline, mixed-caption contrastive training and retrieval evaluation."""

__version__ = "0.1.0"
