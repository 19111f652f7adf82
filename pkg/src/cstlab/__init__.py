"""Recurrent Transformer for constraint satisfaction, with CSP oracles and a desk-scale trainer."""

__version__ = "0.1.0"
