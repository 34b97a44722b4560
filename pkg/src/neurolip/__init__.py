"""Fairness-aware contrastive alignment of brain connectivity graphs and phenotype text."""

__version__ = "0.1.0"
