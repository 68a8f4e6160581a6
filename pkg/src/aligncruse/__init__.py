"""Streaming acoustic echo cancellation with built-in delay alignment."""

__version__ = "0.1.0"
