"""Variational flow matching with controlled generation and equivariance audits."""

__version__ = "0.1.0"
