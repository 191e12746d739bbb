"""Explainable malware-behavior classification from network-event sequences."""

__version__ = "0.1.0"
