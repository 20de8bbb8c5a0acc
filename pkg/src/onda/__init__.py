"""On-device adaptation of keyword embedding models with self-learning and pruning."""

__version__ = "0.1.0"
