"""Task-aware learned image compression with a recognition head."""

__version__ = "0.1.0"
