"""Multi-modal expression and valence-arousal estimation with per-subject standardized time series."""

__version__ = "0.1.0"
