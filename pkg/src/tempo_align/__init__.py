"""Audio-image temporal-agreement pairing for audio-text retrieval transfer."""

__version__ = "0.1.0"
