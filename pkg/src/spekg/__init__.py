"""Speculative knowledge-graph reasoning with noisy positive-unlabeled learning."""

__version__ = "0.1.0"
