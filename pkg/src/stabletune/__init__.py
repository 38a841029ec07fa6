"""Desk-scale lab for few-sample fine-tuning stability of small transformers."""

__version__ = "0.1.0"
