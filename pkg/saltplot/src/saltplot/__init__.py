"""Publication-style figures from assimilation-run CSV outputs."""

__version__ = "0.1.0"
