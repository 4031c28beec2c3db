"""Attention-score dynamics of chain-of-thought fine-tuning on sparse Boolean tasks."""

__version__ = "0.1.0"
