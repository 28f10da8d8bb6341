"""Dual-stage disentangled feature learning for face anti-spoofing."""

__version__ = "0.1.0"
