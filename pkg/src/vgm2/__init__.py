"""Desk-scale personalized federated learning with variational Gaussian-mixture distance markers."""

__version__ = "0.1.0"
