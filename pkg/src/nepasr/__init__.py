"""Character-level Nepali speech recognition from WAV audio to Devanagari text."""

__version__ = "0.1.0"
