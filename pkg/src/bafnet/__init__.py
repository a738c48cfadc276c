"""Noise-adaptive fusion of body-conduction and acoustic microphone signals for speech enhancement."""

__version__ = "0.1.0"
