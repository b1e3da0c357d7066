"""Smile and laugh detection from audio, video and their late fusion."""

__version__ = "0.1.0"
