"""Hand-centric gloss-free sign language translation at desk scale."""

__version__ = "0.1.0"
