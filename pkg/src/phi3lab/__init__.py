"""Desk-scale reference implementations of the Phi-3 family's architectural mechanisms."""

__version__ = "0.1.0"
