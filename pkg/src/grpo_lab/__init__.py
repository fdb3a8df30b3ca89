"""Tabular GRPO dynamics under spurious rewards: updates, entropy, clipping bounds."""

__version__ = "0.1.0"
