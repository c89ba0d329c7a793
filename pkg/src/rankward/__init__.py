"""Guided decoding with V- and Q-style reward models, and the low-rank
matrix-completion view of reward modeling."""

__version__ = "0.1.0"
