"""Version information for streamground package."""

__version__ = "0.1.0"
