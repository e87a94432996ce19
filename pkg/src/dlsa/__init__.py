"""Dynamic label space adjustment for long-tailed classification."""

__version__ = "0.1.0"
