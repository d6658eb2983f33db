"""Transfer-learning pipeline for visual sentiment analysis of disaster images."""

__version__ = "0.1.0"
