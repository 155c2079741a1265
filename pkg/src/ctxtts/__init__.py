"""Context-aware expressive TTS: hierarchical context encoder distilled from a reference encoder."""

__version__ = "0.1.0"
