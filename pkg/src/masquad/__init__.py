"""Masked-attention multi-agent imitation learning on a deterministic grid arena."""

__version__ = "0.1.0"
