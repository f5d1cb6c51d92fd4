"""Modified S-transform decoding of multi-channel neural recordings."""

__version__ = "0.1.0"
