"""Continual test-time adaptation with EMA target prototypes and source alignment."""

__version__ = "0.1.0"
