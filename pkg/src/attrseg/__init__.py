"""Desk-scale open-vocabulary instance segmentation with attribute analysis."""

__version__ = "0.1.0"
