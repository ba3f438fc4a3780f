"""Trust-region policy optimization under a Chebyshev Value-at-Risk constraint."""

__version__ = "0.1.0"
