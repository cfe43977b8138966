"""Desk-scale physical adversarial-object attacks on X-ray prohibited-item detectors."""

__version__ = "0.1.0"
