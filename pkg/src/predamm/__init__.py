"""Predictive constant-product AMM laboratory."""
__version__ = "0.1.0"
