"""Decentralized federated learning with Hessian-weighted aggregation."""

__version__ = "0.1.0"
