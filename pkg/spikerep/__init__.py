"""Self-supervised spike representation learning and sorting pipeline."""

__version__ = "1.0.0"
