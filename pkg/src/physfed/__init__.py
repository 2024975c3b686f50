"""Federated low-dose CT reconstruction with protocol- and anatomy-aware personalization."""

__version__ = "0.1.0"
