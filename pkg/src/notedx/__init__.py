"""Diagnosis prediction from admission notes with a from-scratch text CNN."""

__version__ = "0.1.0"
