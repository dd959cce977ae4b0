"""Top-level package for ece-select."""

from .version import __version__

__all__ = ["__version__"]
