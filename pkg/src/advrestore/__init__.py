"""Adversarial restoration attacks against toy face-embedding models."""
__version__ = "0.1.0"
