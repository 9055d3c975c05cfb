"""Two-slice dynamic Bayesian network pipeline for longitudinal session data."""

__version__ = "0.1.0"
