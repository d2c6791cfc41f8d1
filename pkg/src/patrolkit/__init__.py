"""Multi-robot patrol strategies, simulator, training and evaluation."""

__version__ = "0.1.0"
