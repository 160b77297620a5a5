"""Mixture-of-experts traffic forecasting with a DTW-supervised memory gate."""

__version__ = "0.1.0"
