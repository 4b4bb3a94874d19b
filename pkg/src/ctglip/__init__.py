"""Grounded vision-language pretraining for 3D CT volumes, at desk scale."""

__version__ = "0.1.0"
