"""Kronecker-product-expansion covariance estimation."""

__version__ = "0.1.0"
