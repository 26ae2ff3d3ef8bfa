"""Deterministic uncertainty methods and the evaluation tooling around them."""

__version__ = "0.1.0"
