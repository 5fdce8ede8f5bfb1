"""Camera-based sympathetic arousal estimation."""

__version__ = "0.1.0"
