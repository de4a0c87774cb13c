"""Federated Siamese fingerprint verification with attention-weighted aggregation."""

__version__ = "0.1.0"
