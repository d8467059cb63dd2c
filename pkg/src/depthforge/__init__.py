"""Multi-view depth-map shape reconstruction and generation on numpy."""

__version__ = "0.1.0"
