"""MIMIX: Bayesian mixed-effects factor model for microbiome count data."""

__version__ = "0.1.0"
