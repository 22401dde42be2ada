"""Site-specific radio channel inference toolkit."""

__version__ = "0.1.0"
