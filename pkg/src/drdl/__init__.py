"""Dual-stream reciprocal disentanglement for domain-adaptive re-identification, at desk scale."""

__version__ = "0.1.0"
