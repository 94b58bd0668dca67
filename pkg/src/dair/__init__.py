"""Disentangled-attention regularisation for two-agent planar manipulation."""

__version__ = "0.1.0"
