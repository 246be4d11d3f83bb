"""Instruction-conditioned dynamic FFN pruning at desk scale."""

__version__ = "0.1.0"
