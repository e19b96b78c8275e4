"""Next-search-term recommendation from clinical encounter and search logs."""

__version__ = "0.1.0"
