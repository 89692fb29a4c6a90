"""Source-free subject adaptation for EEG classification."""

__version__ = "0.1.0"
