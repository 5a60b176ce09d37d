"""Unified streaming / offline speech-to-text translation at toy scale."""

__version__ = "0.1.0"
