"""Renormalized multi-scale feature connections and a desk-scale detector."""

__version__ = "0.1.0"
