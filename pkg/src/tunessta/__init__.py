"""Statistical minimum clock period of circuits with post-silicon clock tuning."""

__version__ = "0.1.0"
