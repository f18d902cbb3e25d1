"""Adaptive policy backbone: tabular transport theory and a frozen-backbone adaptation pipeline."""

__version__ = "0.1.0"
