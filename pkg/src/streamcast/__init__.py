"""Temporal ensembling with learning-based aggregation for multi-modal trajectory prediction."""

__version__ = "0.1.0"
