"""Selective synchronization attention: oscillator-based attention blocks on a numpy engine."""
__version__ = "0.1.0"
