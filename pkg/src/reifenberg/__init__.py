"""Reifenberg-flat set approximation: flatness, smooth surfaces, domains."""

__version__ = "0.1.0"
