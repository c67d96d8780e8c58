"""Omnimodal dataset distillation with spectral proxies, on generated data."""

__version__ = "0.1.0"
