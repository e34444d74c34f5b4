"""Emotion-controllable article commenting, end to end on a small autodiff core."""

__version__ = "0.1.0"
