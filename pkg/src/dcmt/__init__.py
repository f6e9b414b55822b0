"""Entire-space CVR estimation with a counterfactual twin tower."""

__version__ = "0.1.0"
