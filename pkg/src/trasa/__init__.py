"""Session-based next-item recommendation with transition-relation-aware self-attention."""

__version__ = "0.1.0"
