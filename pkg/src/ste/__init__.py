"""Self-supervised text erasing: synthesis, style search, and erasing model."""

__version__ = "0.1.0"
